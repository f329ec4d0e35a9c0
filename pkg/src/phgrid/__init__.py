"""Port-Hamiltonian simulation and passivity certification for
islanded AC grids of inverter-interfaced units in the dq frame.

Layering, bottom up: ``phs`` (the ISO port-Hamiltonian record and its
algebra), ``components`` (filter, line, and static-load physics),
``controllers`` (the passivating voltage law and the certified PI
blocks), ``network`` (graph, power-preserving coupling, topology
events), ``sim`` (closed-loop assembly, implicit integration, metrics,
CSV export), ``eip`` (load certification, Newton equilibria, Lyapunov
monitoring), ``presets``/``config``/``cli``/``plots`` (the benchmark
scenario and the front end).
"""

from .components import (DguParams, ExpParams, LineParams, LoadModel,
                         SingularVoltageError, ZipParams, load_current)
from .config import (ConfigError, load_scenario, save_scenario,
                     scenario_from_dict, scenario_to_dict,
                     scenarios_equal)
from .controllers import (IdaPbcGains, PiCertificate, PiGains,
                          SaturationLimits, VoltageReference,
                          certify_pi_gains, pi_gains_from_scalars)
from .eip import (EipVerdict, CertificationError, LyapunovReport,
                  NetworkEquilibrium, NoEquilibriumError, certify_load,
                  check_exp_eip, check_zip_eip, coupling_supply_balance,
                  lyapunov_monitor, monotonicity_probe,
                  segment_equilibria, solve_equilibrium, storage_series)
from .network import (ControllerSpec, CouplingMap, DguSpec,
                      DanglingLineError, LineSpec, MicrogridGraph,
                      TopologyEventError, apply_topology_event,
                      build_coupling)
from .phs import (LinearIsoPhs, QuadraticHamiltonian, costate,
                  phs_derivative, supply_rate, validate_phs)
from .presets import PRESETS, cigre_feeder1
from .sim import (Event, IntegrationError, NetworkModel, Scenario,
                  SolverSettings, Trajectory, WindowMetrics,
                  assemble_vector_field, bumpless_sync, integrate,
                  schedule_at, settling_after_event, settling_metrics,
                  standalone_steady, write_csv)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
