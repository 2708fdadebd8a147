# Copyright 2020 The HuggingFace Datasets Authors and the TensorFlow Datasets Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

# Lint as: python3
"""Utilities for artifact file names."""

import os
import re


_split_re = r"^\w+(\.\w+)*$"


def client_name(client_id: int) -> str:
    if int(client_id) < 0:
        raise ValueError(f"Client ids are non-negative, got {client_id}")
    return f"client_{int(client_id)}"


def round_dirname(round: int) -> str:
    return f"round-{int(round)}"


def variant_slug(label: str) -> str:
    """Lower-case file-system safe form of a variant label, e.g. `"single_client(2)"` -> `"single_client_2"`."""
    return re.sub(r"[^0-9a-zA-Z]+", "_", label).strip("_").lower()


def filename_for_split(name, split, filetype_suffix=None):
    """`client_0`, `train`, `txt` -> `client_0-train.txt`"""
    if os.path.basename(name) != name:
        raise ValueError(f"Should be a name, not a path: {name}")
    if not re.match(_split_re, split):
        raise ValueError(f"Split name should match '{_split_re}' but got '{split}'.")
    filename = f"{name}-{split}"
    if filetype_suffix:
        filename += f".{filetype_suffix}"
    return filename


def filepath_for_split(name, split, data_dir, filetype_suffix=None):
    return os.path.join(data_dir, filename_for_split(name, split, filetype_suffix=filetype_suffix))
