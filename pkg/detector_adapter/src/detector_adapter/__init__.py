"""External flower-detector bridge speaking the PNG/JSON exchange protocol."""

from .adapter import (
    REQUEST_SCHEMA,
    RESPONSE_SCHEMA,
    AdapterConfig,
    load_adapter_config,
    serve,
)
from .models import Model, ModelLoadError, load_model

__version__ = "0.1.0"
