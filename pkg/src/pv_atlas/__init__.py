"""Rooftop solar assessment from satellite imagery with multimodal LLMs.

Pipeline: OpenStreetMap PV site ingestion, satellite scene fetching and
4x4 tiling, human or heuristic tile labeling, fine-tune dataset export,
job orchestration, inference, and cross-region evaluation.
"""

__version__ = "0.1.0"

from .errors import PvAtlasError
from .schema import LocationClass, QuantityBin, TileLabel

__all__ = ["PvAtlasError", "LocationClass", "QuantityBin", "TileLabel",
           "__version__"]
