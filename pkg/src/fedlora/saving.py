import hashlib
import json
import os
import subprocess
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from filelock import FileLock

from . import __version__, config
from .utils.logging import get_logger


logger = get_logger(__name__)

PathLike = Union[str, Path]


def save(path_or_file, **data):
    """
    Saves results to a JSON file together with run metadata: the current time, the commit hash when run
    inside a git work tree, the fedlora version and the interpreter.

    Args:
        path_or_file (`str` or `Path`):
            A `.json` file, or a folder in which the results land as `"result-%Y_%m_%d-%H_%M_%S.json"`.

    Example:
        ```py
        >>> import fedlora
        >>> fedlora.save("./results/", variant="federated", macro_acc=0.445)
        ```
    """
    now = datetime.now()
    file_path = _results_path(Path(path_or_file), now)

    data.update(
        _timestamp=now.isoformat(),
        _git_commit_hash=_git_commit_hash(),
        _fedlora_version=__version__,
        _python_version=sys.version,
        _interpreter_path=sys.executable,
    )
    write_locked(file_path, json.dumps(data, indent=2).encode("utf-8"))
    return file_path


def write_locked(path: PathLike, content: bytes) -> Path:
    """Write `content` to `path` while holding `<path>.lock`, then remove the lock file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lock_path = Path(f"{path}.lock")
    with FileLock(str(lock_path)):
        path.write_bytes(content)
    _unlink_quietly(lock_path)
    return path


def _unlink_quietly(path: Path) -> None:
    try:
        path.unlink()
    except FileNotFoundError:
        pass


def _results_path(path: Path, now: datetime) -> Path:
    if path.suffix:
        folder, file_name = path.parent, path.name
    else:
        folder, file_name = path, now.strftime("result-%Y_%m_%d-%H_%M_%S.json")
    folder.mkdir(parents=True, exist_ok=True)
    return folder / file_name


def _git_commit_hash() -> Optional[str]:
    try:
        inside = subprocess.run(
            ["git", "rev-parse", "--is-inside-work-tree"], capture_output=True, text=True, cwd=os.getcwd()
        )
    except FileNotFoundError:
        return None
    if inside.stdout.strip() != "true":
        return None
    head = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=os.getcwd())
    return head.stdout.strip() or None


def file_digest(path: PathLike) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


def write_manifest(directory: PathLike, files: Optional[Iterable[PathLike]] = None) -> Path:
    """List every artifact under `directory` with its SHA-256 digest in `manifest.json`.

    Args:
        directory (`str` or `Path`): root of the report bundle; paths in the manifest are relative to it.
        files (`list`, *optional*): artifacts to list. Defaults to every regular file under `directory`
            except the manifest itself and lock files.
    """
    directory = Path(directory)
    manifest_path = directory / config.MANIFEST_FILENAME
    if files is None:
        files = [
            path
            for path in directory.rglob("*")
            if path.is_file() and path != manifest_path and not path.name.endswith(".lock")
        ]
    entries = {
        Path(path).resolve().relative_to(directory.resolve()).as_posix(): file_digest(path) for path in files
    }
    content = json.dumps({"files": dict(sorted(entries.items()))}, indent=2) + "\n"
    write_locked(manifest_path, content.encode("utf-8"))
    logger.info(f"Wrote manifest of {len(entries)} artifacts to {manifest_path}")
    return manifest_path


def verify_manifest(directory: PathLike) -> List[str]:
    """Relative paths listed in the manifest that are missing or no longer match their digest."""
    directory = Path(directory)
    with open(directory / config.MANIFEST_FILENAME, encoding="utf-8") as f:
        listed: Dict[str, str] = json.load(f)["files"]
    failures = []
    for relative, digest in listed.items():
        path = directory / relative
        if not path.is_file() or file_digest(path) != digest:
            failures.append(relative)
    return failures
