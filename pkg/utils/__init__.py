"""
Utility modules for downpour
"""

from .validators import (
    ContractError,
    DownpourError,
    ParseError,
    SamplingError,
    UnknownPresetError,
)

__all__ = ['ContractError', 'DownpourError', 'ParseError', 'SamplingError', 'UnknownPresetError']
