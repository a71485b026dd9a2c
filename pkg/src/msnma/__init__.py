"""Flexible Bayesian network meta-analysis of time-to-event data.

Baseline hazards are modelled with M-splines under weighted random-walk
shrinkage priors; non-proportional hazards via stratified baselines or
treatment effects on the spline coefficients. Posteriors are sampled with an
adaptive no-U-turn sampler and summarised into survival/hazard curves,
time-varying log hazard ratios, LOOIC model comparisons, and plain-text
multivariate-Normal export bundles.
"""

__version__ = "0.1.0"

from .splines import (  # noqa: F401
    KnotVector,
    AugmentedKnotVector,
    MSplineBasis,
    augment_knots,
    eval_mspline,
    eval_ispline,
    eval_mspline_derivative,
)
from .knots import (  # noqa: F401
    KnotPlan,
    plan_study_knots,
    plan_common_knots,
    add_knot,
    audit_knots,
)
from .priors import (  # noqa: F401
    softmax,
    inverse_softmax,
    constant_hazard_phi,
    constant_hazard_coefficients,
    rw_weights,
    pexp_weights,
    smoothing_weights,
    RandomWalkPrior,
    NonPropPrior,
    logprior_rw,
    logprior_nonprop,
)
from .data import SurvivalDataset, kaplan_meier  # noqa: F401
from .model import ModelSpec, PriorSettings, build_model  # noqa: F401
from .sampler import SamplerConfig, PosteriorDraws, sample, diagnostics  # noqa: F401
from .products import (  # noqa: F401
    predict_curves,
    log_hazard_ratio_curves,
    loo,
    simulate_survival,
    export_mvn,
)
