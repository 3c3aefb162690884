"""hydrokin: hierarchical Euler-Prandtl expansions and hard-sphere kinetic operators.

Layers of the package, bottom to top:

multiindex   exact multi-index algebra and the analytic-norm coefficient ledger
maxwellian   global/local/reference Maxwellians, boundary weights, ratio identities
vgrid        tensor velocity grids and sphere quadratures (shared plumbing)
collision    hard-sphere collision frequency, kernels, projections, viscosity solve
fluid        Fourier x Chebyshev Euler/Prandtl layer hierarchy and analytic norms
residual     Navier-Stokes residual of the assembled expansion, two routes + sweeps
hilbert      kinetic correction, remainder source terms, boundary data
transport    backward characteristics, Duhamel operators, half-space integrator
cli          config parsing, subcommands, reports, figure emission
"""

__version__ = "0.1.0"

from .vgrid import VelocityGrid
from .maxwellian import mu0, sqrt_mu0, LocalMaxwellian, BadTemperature
from .collision import (
    CollisionTables,
    MomentTriple,
    L_apply,
    gamma_bilinear,
    nu_eval,
    project_P,
    project_boundary,
    solve_Aij,
)
