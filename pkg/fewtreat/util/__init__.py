from .fingerprint import canonical_json, fingerprint, file_fingerprint
from .linalg import project_psd, psd_sqrt, is_psd, min_eigenvalue, symmetrize
from .random import substream, derived_seed
from .report import markdown_template

__all__ = (
    "canonical_json",
    "fingerprint",
    "file_fingerprint",
    "project_psd",
    "psd_sqrt",
    "is_psd",
    "min_eigenvalue",
    "symmetrize",
    "substream",
    "derived_seed",
    "markdown_template",
)
