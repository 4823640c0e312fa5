"""Federated parameter-efficient adaptation of a WaveNet RF interference separator."""

from .adapters import AdapterVector, attach_film, attach_lora, count_trainable, pack, unpack
from .federation import AdaptConfig, CommLedger, fedavg, partition, run_federated, run_local
from .signal_chain import InterferenceKind, OfdmConfig, gen_interference, mix
from .wavenet import WaveNet, WaveNetConfig, build

__all__ = [
    "AdaptConfig", "AdapterVector", "CommLedger", "InterferenceKind", "OfdmConfig", "WaveNet",
    "WaveNetConfig", "attach_film", "attach_lora", "build", "count_trainable", "fedavg",
    "gen_interference", "mix", "pack", "partition", "run_federated", "run_local", "unpack",
]
__version__ = "0.1.0"
