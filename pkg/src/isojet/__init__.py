"""Jet-rank certification, compatibility operators, and algebraic inversion of
the metric-inducing operator's linearization, at desk scale."""

from .indices import (
    defect,
    jet_dim,
    middle_root,
    minimal_jet_order,
    multi_indices,
    threshold_report,
    uts_top_count,
)
from .maps import (
    AnalyticMap,
    AtomSum,
    GridPatch,
    builtin_map,
    free_euclidean,
    jet_matrix,
    projected,
    rank_profile,
    torus,
)
from .metric import ClosedFormMetric, fd_linearization_check, induced_metric, metric_linearization
from .pdo import LinearPDO, SubmanifoldSpec, formal_adjoint, lie_pdo, transversality_check
from .compat import compatibility_pdo, dependence_coeffs, independence_check, uts_restriction
from .inverse import assemble_system, bundle_membership, solve_pointwise, verify_left_inverse
from .nash import infinitesimal_inverse_free, infinitesimal_inverse_full_rank, isometric_continuation

__version__ = "0.1.0"
