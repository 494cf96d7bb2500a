"""Two-tier locked-FPR malware detection on raw PE bytes."""

from .config import PRESETS, RunConfig, derive_seed
from .corpus import CorpusSpec, generate, generate_dataset, ingest, reference_spec
from .estimators import ConvNetClassifier, EchelonClassifier, Tier2Transformer
from .evaluation import TwoTierConfusion, evaluate, overall_fpr, overall_tpr
from .exceptions import *  # noqa: F401,F403
from .pe_format import PeSample, SectionEntry, parse_pe, region_map, section_of_offset
from .pipeline import fit_echelon, predict, run_full, split, sweep_filter_width
from .tier2 import EchelonModel

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "RunConfig", "derive_seed", "CorpusSpec", "generate", "generate_dataset", "ingest",
    "reference_spec", "ConvNetClassifier", "EchelonClassifier", "Tier2Transformer",
    "TwoTierConfusion", "evaluate", "overall_fpr", "overall_tpr", "PeSample", "SectionEntry",
    "parse_pe", "region_map", "section_of_offset", "fit_echelon", "predict", "run_full", "split",
    "sweep_filter_width", "EchelonModel",
]
