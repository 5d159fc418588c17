import logging

from cipherdenoise.ciphertensor import CipherTensor, PlainTensor, encrypt_tensor
from cipherdenoise.encoding import FixedPointParams, ScaleTag, overflow_budget
from cipherdenoise.errors import CipherDenoiseError
from cipherdenoise.ledger import SessionLedger
from cipherdenoise.model import (
    LayerDesc,
    LayerKind,
    ModelSpec,
    demo_linear_model,
    demo_model,
    infer_plain_fixed,
    infer_plain_float,
    load_model,
    save_model,
)
from cipherdenoise.paillier import PaillierPrivateKey, PaillierPublicKey, keygen
from cipherdenoise.protocol import (
    ClientConfig,
    InferenceClient,
    InferenceServer,
    ServerConfig,
    run_linear_session,
    run_nonlinear_session,
)

__version__ = "0.1.0"
__all__ = [
    "CipherDenoiseError",
    "CipherTensor",
    "ClientConfig",
    "FixedPointParams",
    "InferenceClient",
    "InferenceServer",
    "LayerDesc",
    "LayerKind",
    "ModelSpec",
    "PaillierPrivateKey",
    "PaillierPublicKey",
    "PlainTensor",
    "ScaleTag",
    "ServerConfig",
    "SessionLedger",
    "demo_linear_model",
    "demo_model",
    "encrypt_tensor",
    "infer_plain_fixed",
    "infer_plain_float",
    "keygen",
    "load_model",
    "overflow_budget",
    "run_linear_session",
    "run_nonlinear_session",
    "save_model",
]

"""Paillier-encrypted CNN inference for low-dose CT denoising.

A client encrypts a slice under its own key; the server evaluates the
convolutional layers homomorphically and resolves each ReLU through a
sign-only exchange, so it never sees the image and the client never sees
the weights.
"""

logger = logging.getLogger(__name__)
