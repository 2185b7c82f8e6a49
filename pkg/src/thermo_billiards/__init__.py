"""Random billiards on the flat torus with thermostat disks.

Collision chain and continuous-time flow, closed-form equilibrium laws,
estimators for stationary tails and mixing, and scripted experiments.
"""

from .dynamics import (
    ChainTrace,
    CollisionState,
    FlowEnsemble,
    FlowState,
    StepRecord,
    SuspensionState,
    chain_step,
    collide,
    flow,
    lift_to_flow,
    residual_flight_time,
    run_chain,
    sample_outgoing_angle,
    sample_tangential,
)
from .errors import (
    BilliardError,
    DomainError,
    InvalidState,
    NoCollisionWithinCap,
    UnsupportedRegime,
)
from .experiments import (
    EXPERIMENTS,
    DriftConfig,
    EquilibrationConfig,
    ExperimentReport,
    GrazingConfig,
    LawsConfig,
    Metric,
    SubexpConfig,
    TailConfig,
    run_drift_check,
    run_equilibration,
    run_grazing_scaling,
    run_stationary_laws,
    run_subexp_lowerbound,
    run_tail_scaling,
    score,
)
from .geometry import (
    BilliardTable,
    BoundaryPoint,
    CollisionHit,
    Disk,
    HorizonEstimate,
    ValidationReport,
    boundary_point_frame,
    incoming_angle,
    next_collision,
    probe_horizon,
    reference_table,
    single_disk_table,
    validate_table,
)
from .measures import (
    PotentialParams,
    TailPrediction,
    angle_density,
    equilibrium_collision_density,
    equilibrium_energy_density,
    equilibrium_speed_density,
    potential_V,
    tail_prediction,
)
from .rng import RngStream
from .statistics import (
    DriftEstimate,
    Histogram,
    ModelVerdict,
    StationaryEnsemble,
    TailCurve,
    Verdict,
    drift_ratio,
    grazing_fraction,
    histogram,
    loglog_fit,
    model_compare_exp_vs_power,
    roof_integrability,
    stationary_sample,
    tail_curve,
    tv_distance,
)

__version__ = "0.1.0"
