"""
Binary homodyne sample files: 8-byte magic then little-endian float64
(phi, x) pairs.
"""
import numpy as np

from app.core.errors import FileFormatError
from app.schemas.schemas import SampleSet

MAGIC = b"HOMTOM01"
_PAIR = np.dtype("<f8")


class BinaryService:
    """Service for the compact binary sample format."""

    def write_samples(self, samples: SampleSet) -> bytes:
        pairs = np.column_stack([samples.phi, samples.x]).astype(_PAIR)
        return MAGIC + pairs.tobytes()

    def read_samples(self, file_content: bytes) -> SampleSet:
        """
        Raises:
            FileFormatError: wrong magic or a payload that is not whole (phi, x) pairs
        """
        if not file_content.startswith(MAGIC):
            raise FileFormatError("Archivo binario sin cabecera HOMTOM01")
        payload = file_content[len(MAGIC):]
        if len(payload) % (2 * _PAIR.itemsize):
            raise FileFormatError(f"Carga útil de {len(payload)} bytes no es múltiplo de 16")
        values = np.frombuffer(payload, dtype=_PAIR).reshape(-1, 2)
        if not np.all(np.isfinite(values)):
            raise FileFormatError("El archivo binario contiene valores no finitos")
        return SampleSet.from_arrays(values[:, 0].copy(), values[:, 1].copy())

    def is_binary(self, file_content: bytes) -> bool:
        return file_content[: len(MAGIC)] == MAGIC


_binary_service: BinaryService | None = None


def get_binary_service() -> BinaryService:
    """Get binary service singleton."""
    global _binary_service
    if _binary_service is None:
        _binary_service = BinaryService()
    return _binary_service
