"""Inverse dynamics for robots in contact, with contact force prediction."""
from .contact_geometry import ContactPoint, ContactSet, build_wrenches, closest_sphere_halfspace, closest_sphere_sphere
from .convex_qp import Qp, nullspace_basis, solve_qp
from .errors import IdynError
from .harness import ControllerSpec, RunConfig, emit_report, make_scenario, run_scenario, run_timing_sweep
from .inverse_dynamics import (
    FORMULATIONS,
    IdynRequest,
    IdynResult,
    estimate_flops_stage1,
    find_indices,
    idyn_coulomb_lcp,
    idyn_no_slip,
    idyn_qp,
    idyn_qp_no_slip,
    solve_idyn,
)
from .lcp_core import Lcp, Mlcp, solve_lemke, solve_ppm, verify_solution
from .multibody import (
    Composite,
    FreeBody,
    LeggedBody,
    PlanarChain,
    PointMass,
    assemble_dynamics,
    find_contacts,
    forward_step_compliant,
    forward_step_rigid,
)

__version__ = "0.1.0"
