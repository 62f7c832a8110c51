"""Adaptive Taylor-Hood finite elements for permeability identification in
steady Navier-Stokes-Brinkman flow."""

from .mesh import (Mesh, build_lshape, build_structured_square, refine_bisect,
                   refine_uniform)
from .spaces import (CELL_P0, NODAL_P1, SCALAR_P1, VECTOR_P2, DofMap, Field,
                     ImplicitControl, build_dofmap, interpolate_nodal,
                     project_box, zero_field)
from .forms import (FemContext, assemble_adjoint_system,
                    assemble_state_jacobian, assemble_state_residual,
                    restrict_observation, triangle_rule)

__version__ = "0.1.0"
