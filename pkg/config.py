# config.py
import math

# Domain and grid (desk scale)
DOMAIN_SIZE = 0.5  # m, cube edge
GRID_RESOLUTION = 64
DEFAULT_DT = 4e-5  # s
DEFAULT_DT_ACC = 4e-3  # s, force accumulation window (100 steps)
GRAVITY = (0.0, -9.81, 0.0)
CFL_FACTOR = 0.2
DEFAULT_SEED = 0
MAX_EPISODE_TIME = 2.0  # s of simulated time

# Stabilization
DAMPING_GRID = 0.5  # 1/s
DAMPING_PARTICLE = 0.1  # 1/s
J_MIN = 0.4
J_MAX = 1.4
J_CLAMP_MODES = ("nearest", "normalize")
GRID_SPEED_CAP_FACTOR = None  # times dx/dt when set (0.45 is a safe value)
BOUNDARY_CELLS = 2  # sticky-normal wall band
PARTICLE_MARGIN_CELLS = 2  # particles must stay this far from the walls
PARTICLES_PER_CELL_AXIS = 2  # 8 particles per cell
REDUCTION_MODES = ("deterministic", "fast")

# Plasticity
HARDENING_MODULUS = 0.0  # Pa, yield growth per unit plastic strain
PERZYNA_RELAXATION = 0.0  # s, 0 gives rate-independent return

# Resolution-invariant cutting thresholds
DX_REF = DOMAIN_SIZE / GRID_RESOLUTION
BAND0 = 0.006  # m
BAND_GAMMA = 0.5
V_HAT = 1e-4
C_MIN = 0.05
C_NORM_SCALE = 0.35  # c_norm = C_NORM_SCALE * dx / dt
DAMAGE_RATE = 200.0  # 1/s
DAMAGE_MODES = ("proportional", "constant")
EPS_SOFT = 1e-3
DOWNWARD_STROKE_MIN = 0.1

# Knife speed resistance
K2_EXPONENT_E = 0.5
K2_EXPONENT_YIELD = 0.5
SPEED_FLOOR = 0.0  # minimum normalized knife speed, 0 disables

# Tip separation force and segmentation
TIP_FORCE = 5e-4  # N per particle
TIP_BAND_SCALE = 1.5  # times the damage band
LINK_RADIUS_CELLS = 0.75  # link radius in grid cells
DAMAGE_CUT = 0.5
SEGMENT_EVERY_WINDOWS = 10

# Contact
RESTITUTION = 0.0
FRICTION_MU = 0.4
QUERY_AABB_PAD_CELLS = 2.0
CONTACT_THRESHOLD_CELLS = 0.5
BOARD_TOP = 0.05  # m, height of the cutting board surface

# Knife geometry (wedge blade, local frame: x length, y height, z lateral)
KNIFE_LENGTH = 0.12  # m
KNIFE_HEIGHT = 0.05  # m
KNIFE_SPINE_THICKNESS = 0.002  # m
KNIFE_EDGE_HALF_ANGLE = math.radians(10.0)
KNIFE_SPINE_ARC_SEGMENTS = 8

# Materials
DEFAULT_DENSITY = 1000.0  # kg/m^3
DEFAULT_YOUNGS = 0.3e6  # Pa
DEFAULT_POISSON = 0.3
DEFAULT_YIELD_STRESS = 2.0e4  # Pa
DEFAULT_K2_REF = 4.0
REFERENCE_YOUNGS = 0.3e6
REFERENCE_YIELD_STRESS = 2.0e4

# Object catalogue: kind -> (primitive, base dimensions in m)
# capsule: (radius, half length); sphere: (radius,); ellipsoid: semi-axes; box: half extents
OBJECT_PRIMITIVES = {
    "banana": ("capsule", (0.018, 0.06)),
    "cucumber": ("capsule", (0.02, 0.07)),
    "orange": ("sphere", (0.04,)),
    "apple": ("sphere", (0.04,)),
    "peach": ("sphere", (0.035,)),
    "melon": ("sphere", (0.06,)),
    "strawberry": ("ellipsoid", (0.018, 0.022, 0.018)),
    "block": ("box", (0.05, 0.02, 0.025)),
}
FOOD_KINDS = ("orange", "strawberry", "melon", "cucumber", "banana", "apple", "peach")
DEFAULT_OBJECT_KIND = "banana"
OBJECT_CENTER_XZ = (0.25, 0.25)

# Trajectory planning
CUT_STYLES = ("Normal", "Bias", "Guillotine", "Saw")
CUT_HEIGHT = 0.03  # m above the object top
APPROACH_SPEED = 0.3  # m/s
TRAJ_SAMPLE_DT = 0.005  # s between waypoints
BIAS_ANGLE = math.radians(30.0)
SAW_AMPLITUDE = 0.01  # m
SAW_FREQUENCY_RANGE = (2.0, 6.0)  # Hz
GUILLOTINE_TIP_MARGIN = 0.01  # m beyond the object along the blade
SUCCESS_TOL_FRAC = 0.1
CONTACT_TOL = 1e-9
AABB_SURFACE_SAMPLES = 11  # per face edge
RATIO_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
SPLIT_COUNTS = (3, 4, 5)
IMPLIED_SPLIT_PIECES = 4  # pieces assumed when a boundary is named without a count

# Scene randomization defaults (offsets around the base scene)
AUG_POSITION_OFFSET = 0.03  # m, +/- on x and z
AUG_SCALE_RANGE = (0.9, 1.1)
AUG_ROTATION_RANGE = (-math.pi / 12, math.pi / 12)
AUG_HEIGHT_RANGE = (0.02, 0.04)
AUG_SPEED_RANGE = (0.2, 0.4)
DATASET_COUNT_PER_TASK = 5

# Safety module
F_MAX = 100.0  # N
SAFE_VELOCITY_TOL = 1e-6  # m/s
FORCE_MODEL_KINDS = ("linear", "quadratic")
DEFAULT_FORCE_MODEL = "quadratic"
SAFETY_VELOCITY_GRID = (0.1, 0.2, 0.4, 0.8)
SAFETY_YOUNGS_GRID = (0.1e6, 0.5e6, 0.9e6)
SAFETY_YIELD_GRID = (1.0e4, 3.0e4)
SAFETY_AGGRESSIVE_SPEED = 1.5  # m/s

# Stiffness sweep
SWEEP_YOUNGS = tuple(round(0.1e6 * i) for i in range(1, 10))

# Instructions
TEMPLATE_FILE = "templates/instructions.json"
