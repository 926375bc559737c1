import numpy as np
from hypothesis import strategies as st

from collabslam.geom import Pose

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
unit_quat = (
    st.tuples(*[st.floats(-1.0, 1.0, allow_nan=False) for _ in range(4)])
    .map(np.array)
    .filter(lambda q: np.linalg.norm(q) > 0.1)
)
poses = st.builds(Pose, unit_quat, vec3)


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0) -> Pose:
    q = rng.normal(size=4)
    return Pose(q, rng.normal(scale=trans_scale, size=3))


def look_pose(eye, yaw: float, pitch: float = 0.0) -> Pose:
    """world_from_cam for a camera at ``eye`` looking along ``yaw``, pitched down by ``pitch`` (rad)."""
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    return Pose.from_rt(np.column_stack([right, down, fwd]), eye)


def random_ground_camera(rng: np.random.Generator, lo=(0.0, 0.0), hi=(90.0, 60.0)) -> Pose:
    eye = [rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(0.5, 2.0)]
    return look_pose(eye, rng.uniform(-np.pi, np.pi), rng.uniform(-0.35, 0.35))
