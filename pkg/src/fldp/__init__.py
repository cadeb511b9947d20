"""fldp: a deterministic desk-scale testbed for studying how differential
privacy defends federated learning against backdoor and inference attacks."""

from .data import CsvSchema, Dataset, Example, PartitionScheme, TriggerSpec
from .fl import AdversaryHooks, ClientSpec, ClientUpdate, FlState, SelectionSpec, ServerConfig
from .nn import Batch, DivergenceError, ModelArch, ParamVector
from .privacy import CdpConfig, DpSgdConfig, PrivacyLedger, RDP_ORDERS
from .rng import RngStream

__all__ = [
    "AdversaryHooks", "Batch", "CdpConfig", "ClientSpec", "ClientUpdate", "CsvSchema",
    "Dataset", "DivergenceError", "DpSgdConfig", "Example", "FlState", "ModelArch",
    "ParamVector", "PartitionScheme", "PrivacyLedger", "RDP_ORDERS", "RngStream",
    "SelectionSpec", "ServerConfig", "TriggerSpec",
]

__version__ = "0.1.0"
