# flake8: noqa
# Lint as: python3
# pylint: enable=line-too-long
# pylint: disable=g-import-not-at-top,g-bad-import-order,wrong-import-position

__version__ = "0.1.0.dev0"

from .aggregation import ClientUpdate, GlobalAdapterState, MergeStrategy, WeightingMode, aggregate
from .data import ClientShard, Example, TaskSpec, generate
from .errors import *
from .experiment import ExperimentPlan, run_experiment
from .fedproto import FedConfig, run_aggregator, run_client, simulate
from .identity import ClientIdentity, KeyRegistry, Ledger, sign_update, verify_update
from .lora_model import AdapterPair, AdapterSet, BaseModel, ModelDims, forward, init_adapters, loss_and_grads
from .saving import save
from .utils import *
from .utils import logging
