"""Tests for the command-line value transforms."""

from dataclasses import dataclass
from typing import Optional

import pytest
from cfgclasses import arg, optional, parse_args

from ..errors import InputError
from ..transforms import bytesize, bytesizes, optional_bytesize


def test_bytesize_values() -> None:
    """Suffixes are powers of 1024 and case does not matter."""
    assert bytesize("0") == 0
    assert bytesize("512") == 512
    assert bytesize("2K") == 2048
    assert bytesize("2kb") == 2048
    assert bytesize("3MiB") == 3 * 1024**2
    assert bytesize(" 1 G ") == 1024**3
    assert bytesize("1T") == 1024**4


def test_bytesize_invalid() -> None:
    """Anything else is an input error."""
    for text in ("", "K", "1.5G", "-3", "12 parsecs", "1KK"):
        with pytest.raises(InputError):
            bytesize(text)


def test_bytesize_usage() -> None:
    """Test the byte size transform usage."""

    @dataclass
    class TestConfig:
        """Test Config"""

        memory: int = arg(
            "Memory budget", transform=bytesize, transform_type=str
        )

    config = parse_args(TestConfig, ["--memory", "16M"])
    assert config.memory == 16 * 1024**2


def test_optional_and_listed_sizes() -> None:
    """Missing sizes stay missing and lists convert element by element."""
    assert optional_bytesize(None) is None
    assert optional_bytesize("4K") == 4096
    assert bytesizes([]) == []
    assert bytesizes(["1", "1K", "1M"]) == [1, 1024, 1024**2]
    with pytest.raises(InputError):
        bytesizes(["1", "one"])


def test_listed_sizes_usage() -> None:
    """Optional and list fields take sizes on the command line."""

    @dataclass
    class TestConfig:
        """Test Config"""

        limit: Optional[int] = optional(
            "Limit", transform=optional_bytesize, transform_type=str
        )
        sizes: list[int] = arg(
            "Sizes",
            default_factory=list,
            transform=bytesizes,
            transform_type=list[str],
        )

    config = parse_args(TestConfig, ["--sizes", "1K", "2"])
    assert config.sizes == [1024, 2]
    assert config.limit is None
    config = parse_args(TestConfig, ["--limit", "3M"])
    assert config.limit == 3 * 1024**2
    assert config.sizes == []
