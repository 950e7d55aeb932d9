"""Tightly-coupled GNSS-visual-inertial odometry on an invariant error
parameterization, with a synthetic sensor simulator, degeneracy and
observability analysis tools, and a batch CLI."""

from .config import FilterConfig, ScenarioConfig, load_config
from .geometry import ExtendedPose, GeodeticPoint, Pose, gamma, skew, so3_log
from .state import (
    CONSTELLATIONS,
    Landmark,
    NavState,
    StateLayout,
    augment_clone,
    boxminus,
    boxplus,
    delayed_init,
    kalman_update,
    marginalize,
)
from .propagation import ProcessNoise, propagate_covariance, propagate_mean, transition_matrix
from .vision import FeatureTrack, VisionConfig, VisionProcessor, triangulate
from .gnss import Alignment, GnssManager, SatelliteObservation, initialize_alignment, spp_solve
from .symmetry import DegeneracyReport, classify_degeneracy, observability_matrix, unobservable_directions
from .simulator import Dataset, read_dataset, simulate_scenario, write_dataset
from .runner import montecarlo, run

__version__ = "0.1.0"
