"""CRC-64/XZ (ECMA-182 polynomial, reflected) used by the binary containers."""
from fastcrc import crc64 as _crc64


def crc64(data: bytes) -> int:
    return _crc64.xz(bytes(data))
