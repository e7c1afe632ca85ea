"""Privacy-preserving federated identity enrollment over an RSA-OPRF."""

from .errors import FedblindError, ProtocolRejection
from .numcore import PublicKey, RsaKeyPair, Seed, generate_keypair
from .protocol import CentralService, FederationDirectory, IdentityProvider, KycOracle, Upi, User
from .harness import SimConfig, SimReport, run_scenario

__version__ = "0.1.0"

__all__ = [
    "CentralService", "FederationDirectory", "FedblindError", "IdentityProvider", "KycOracle",
    "ProtocolRejection", "PublicKey", "RsaKeyPair", "Seed", "SimConfig", "SimReport", "Upi",
    "User", "generate_keypair", "run_scenario",
]
