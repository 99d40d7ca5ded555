"""
Transform functions for command-line values.

.. autofunction:: bytesize
.. autofunction:: optional_bytesize
.. autofunction:: bytesizes

"""

import re
from typing import Optional

from .errors import InputError

__all__ = (
    "bytesize",
    "optional_bytesize",
    "bytesizes",
)

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([KMGT]?)(i?B)?\s*$", re.IGNORECASE)


def bytesize(text: str) -> int:
    """
    Transform function for byte sizes.

    Accepts a plain number of bytes or a number with a ``K``, ``M``, ``G`` or
    ``T`` suffix, optionally followed by ``B`` or ``iB``; every suffix is a
    power of 1024.

    :param text:
        The size as given on the command line.
    :return:
        The size in bytes.
    :raises InputError: If the text is not a size.
    """
    match = _SIZE_RE.match(text)
    if match is None:
        raise InputError(f"invalid byte size {text!r}")
    number, prefix, _ = match.groups()
    return int(number) * 1024 ** " KMGT".index(prefix.upper() or " ")


def optional_bytesize(text: Optional[str]) -> Optional[int]:
    """
    Transform function for byte sizes that may be left out.

    :param text:
        The size as given on the command line, or None if not given.
    :return:
        The size in bytes, or None.
    :raises InputError: If the text is not a size.
    """
    return None if text is None else bytesize(text)


def bytesizes(texts: list[str]) -> list[int]:
    """Transform function for a list of byte sizes."""
    return [bytesize(text) for text in texts]
