"""Converters from published body model archives and scan directories
into the containers and manifests of the fitting package."""

from .archives import ConversionError
from .datasetconv import Record, convert_dataset, load_records
from .modelconv import ConversionManifest, convert_model

__version__ = "0.1.0"

__all__ = [
    "ConversionError",
    "ConversionManifest",
    "Record",
    "convert_dataset",
    "convert_model",
    "load_records",
    "__version__",
]
