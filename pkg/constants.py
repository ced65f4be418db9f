"""
Constants used throughout downpour
"""

from typing import Final, Tuple

# Rendering
BETA_RENDER: Final[float] = 250.0  # Occlusion sharpness for pure rendering
BETA_DIFFERENTIATE: Final[float] = 30.0  # Occlusion sharpness used while optimizing
PROJECTION_EPS: Final[float] = 1e-6  # Camera-frame z at or below this is invisible
RENDER_CHUNK_SIZE: Final[int] = 256  # Particles per worker batch

# Templates
MIN_TEMPLATE_SIZE: Final[int] = 3  # Smallest allowed (odd) template side
FOOTPRINT_CACHE_MB: Final[int] = 512  # Memory budget of the evaluated-footprint cache
FOOTPRINT_CACHE_FULL_MAX: Final[int] = 256  # Larger footprints are cached per image window
DEFOCUS_MAX_RADIUS: Final[float] = 4.0  # Clamp of the disk PSF radius law (pixels)
TEMPLATE_LIBRARY_SIZE: Final[int] = 8  # Rotated templates per particle set

# Particle sampling
SAMPLING_MIN_DEPTH: Final[float] = 1.0  # d_min for uniform depth sampling (meters)
SAMPLING_MAX_ATTEMPTS: Final[int] = 1_000_000  # Rejection budget per particle set
SAMPLING_MARGIN: Final[float] = 0.5  # Pixel draw area grows by this fraction per side
FOG_TRANSPARENCY: Final[float] = 0.3  # Depth-constant fog transparency

# Attack
ATANH_EPS: Final[float] = 1e-6  # Bounded variables live in (eps, 1 - eps)
AEE_SMOOTHING: Final[float] = 1e-12  # sqrt(|e|^2 + this) in the AEE gradient
DEFAULT_LEARNING_RATE: Final[float] = 1e-5
DEFAULT_STEPS: Final[int] = 750
DEFAULT_ALPHA: Final[float] = 1000.0
ADAM_BETA1: Final[float] = 0.9
ADAM_BETA2: Final[float] = 0.999
ADAM_EPS: Final[float] = 1e-8

# Victim flow estimator (Horn-Schunck)
HS_SMOOTHNESS: Final[float] = 0.1  # lambda
HS_LEVELS: Final[int] = 3
HS_ITERATIONS: Final[int] = 100  # Per pyramid level
HS_DOWNSCALE: Final[float] = 0.5
HS_MIN_LEVEL_SIZE: Final[int] = 8  # Coarsest level must be at least 8x8
GRAY_WEIGHTS: Final[Tuple[float, float, float]] = (0.299, 0.587, 0.114)

# Gradient checking
FD_STEP_POSITION: Final[float] = 1e-4  # Meters
FD_STEP_ETA: Final[float] = 1e-3  # atanh space
FD_STEP_IMAGE: Final[float] = 1e-6  # Intensity step for victim gradient checks
FD_REL_TOL: Final[float] = 1e-3
FD_ABS_FLOOR: Final[float] = 1e-8
GRADCHECK_MAX_SIDE: Final[int] = 128  # Larger gradcheck requests are refused
GRADCHECK_DEFAULT_SIZE: Final[Tuple[int, int]] = (48, 32)  # W x H
GRADCHECK_DEFAULT_PARTICLES: Final[int] = 20
ORACLE_MAX_SIDE: Final[int] = 64
ORACLE_MAX_PARTICLES: Final[int] = 50

# File formats
FLO_MAGIC: Final[bytes] = b"PIEH"
PPM_MAGIC: Final[bytes] = b"P6"
PFM_GRAY_MAGIC: Final[bytes] = b"Pf"
SNAPSHOT_VERSION: Final[int] = 1
REPORT_VERSION: Final[int] = 1


# Output file names - centralized to avoid magic strings
class OutputNames:
    """Centralized output file names."""
    # Scene bundle
    FRAME1 = "frame1.ppm"
    FRAME2 = "frame2.ppm"
    DEPTH1 = "depth1.pfm"
    DEPTH2 = "depth2.pfm"
    CAMERAS = "cameras.txt"
    FLOW_GT = "flow_gt.flo"

    # External evaluation
    BENIGN_FLOW = "benign.flo"
    ATTACKED_FLOW = "attacked.flo"

    # Run outputs
    AUG1 = "aug1.ppm"
    AUG2 = "aug2.ppm"
    FLOW_BENIGN = "flow_benign.flo"
    FLOW_ATTACKED = "flow_attacked.flo"
    FLOW_BENIGN_VIS = "flow_benign.ppm"
    FLOW_ATTACKED_VIS = "flow_attacked.ppm"
    BEST_AUG1 = "best_aug1.ppm"
    BEST_AUG2 = "best_aug2.ppm"
    FLOW_BEST = "flow_best.flo"
    FLOW_BEST_VIS = "flow_best.ppm"
    METRICS = "metrics.json"
    REPORT = "report.json"
    MANIFEST = "manifest.json"
    PARTICLES = "particles.npz"
    DEBUG_CSV = "particles.csv"
