"""Bounds on target-domain classifier risk from multi-domain discrete data."""

__version__ = "0.1.0"

from .bounds import (  # noqa: F401
    BoundResult,
    BoundTask,
    OptimizerConfig,
    brute_force_bound,
    decompose_query,
    fit_c_factor,
    solve_bounds,
)
from .canonical import CanonicalModel, ConstraintSet, check_constraints, from_scm  # noqa: F401
from .cro import CroConfig, CroResult, cro_loop, group_dro  # noqa: F401
from .errors import BudgetError, InfeasibleError, InputError, TransboundError  # noqa: F401
from .gibbs import GibbsSampler, GibbsState, PosteriorSummary, run_chain  # noqa: F401
from .fixtures import FixtureBundle, builtin_classifier, fixture  # noqa: F401
from .graphs import (  # noqa: F401
    CausalDiagram,
    SelectionDiagram,
    ancestral_set,
    c_components,
    d_separated,
    transportable_from,
)
from .scm import (  # noqa: F401
    Dataset,
    DiscreteSCM,
    FunctionalTable,
    JointTable,
    TabularClassifier,
    conditional_mean,
    expectation,
    risk,
    squared_error,
    zero_one_loss,
)
