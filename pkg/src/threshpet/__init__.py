"""Threshold-anonymous petitions.

Signatures stay encrypted until ``n`` validated users have signed; each
accepted signature publishes one key fragment, and once all fragments
are out anyone can decrypt the full signer list.
"""

from .chain import SignatureChain, verify_bytes
from .dkg import run_ceremony, verify_ceremony
from .group import SECP256K1, TOY, get_group, make_rng
from .simnet import ScenarioScript, run_scenario

__all__ = [
    "SECP256K1", "TOY", "ScenarioScript", "SignatureChain", "get_group", "make_rng",
    "run_ceremony", "run_scenario", "verify_bytes", "verify_ceremony",
]
__version__ = "0.1.0"
