"""QR-code steganography with an attention-based invertible flow."""

from .errors import (
    CapacityExceeded,
    EmptyDataset,
    FormatError,
    NonFiniteLoss,
    NonFiniteValue,
    QRStegError,
    ShapeMismatch,
    SingularMatrix,
    UnsupportedVersion,
)
from .qr_codec import ModuleMatrix, decode_matrix, encode_message

__version__ = "0.1.0"
