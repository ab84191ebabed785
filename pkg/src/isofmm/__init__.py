"""Isomorphic functional mixed models for quantitative image data."""

from isofmm.errors import ConfigError, DataError, IsoFMMError, NumericalError
from isofmm.imagecore import Dataset, ImageGrid, VecImage
from isofmm.wavelet import CoefIndex, CoefIndexMap, CoefSet, WaveletSpec

__version__ = "0.1.0"

__all__ = [
    "CoefIndex",
    "CoefIndexMap",
    "CoefSet",
    "ConfigError",
    "DataError",
    "Dataset",
    "ImageGrid",
    "IsoFMMError",
    "NumericalError",
    "VecImage",
    "WaveletSpec",
]
