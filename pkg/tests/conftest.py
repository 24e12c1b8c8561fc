import numpy as np
import pytest

from distslam import se3
from distslam.posegraph import EdgeKind, GlobalKey, MeasurementEdge, PoseGraph
from distslam.world import diag_information, perturb


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def chain_graph(robot, truth, rng=None, sigma_rot=0.0, sigma_trans=0.0, info_sigmas=(0.01, 0.1)):
    """Robot graph from ground-truth poses; odometry optionally perturbed."""
    info = diag_information(*info_sigmas)
    g = PoseGraph(owner=robot)
    pose = se3.Pose3.identity()
    g.poses[GlobalKey(robot, 0)] = pose
    for k in range(1, len(truth)):
        rel = se3.between(truth[k - 1], truth[k])
        if rng is not None:
            rel = perturb(rel, sigma_rot, sigma_trans, rng)
        g.add_odometry(MeasurementEdge(GlobalKey(robot, k - 1), GlobalKey(robot, k), rel, info, EdgeKind.ODOMETRY))
        pose = se3.compose(pose, rel)
        g.poses[GlobalKey(robot, k)] = pose
    return g


def random_trajectory(rng, n, step=1.0, turn=0.3, origin=None):
    pose = origin if origin is not None else se3.Pose3.identity()
    out = [pose]
    for _ in range(n - 1):
        w = np.array([rng.normal(0, 0.02), rng.normal(0, 0.02), rng.normal(0, turn)])
        pose = se3.compose(pose, se3.Pose3(se3.so3_exp(w), [step, rng.normal(0, 0.1), rng.normal(0, 0.05)]))
        out.append(pose)
    return out


def inter_edge(truth, ka, kb, rng=None, sigma_rot=0.0, sigma_trans=0.0, info_sigmas=(0.01, 0.1)):
    rel = se3.between(truth[ka], truth[kb])
    if rng is not None:
        rel = perturb(rel, sigma_rot, sigma_trans, rng)
    return MeasurementEdge(ka, kb, rel, diag_information(*info_sigmas), EdgeKind.INTER_ROBOT)


def two_robot_problem(rng, max_poses=100, n_loops=(1, 8), sigma=(0.01, 0.1)):
    """Random connected 2-robot problem: ``(graphs, inliers, truth)``.

    Truth is expressed so that robot 0's first keyframe is the identity.
    """
    na = int(rng.integers(5, max_poses // 2 + 1))
    nb = int(rng.integers(5, max_poses - na + 1))
    origin = se3.Pose3(se3.so3_exp([0, 0, rng.uniform(-3, 3)]), [rng.uniform(-3, 3), rng.uniform(-3, 3), 0])
    ta = random_trajectory(rng, na)
    tb = random_trajectory(rng, nb, origin=origin)
    truth = {GlobalKey(0, k): p for k, p in enumerate(ta)} | {GlobalKey(1, k): p for k, p in enumerate(tb)}
    graphs = {0: chain_graph(0, ta, rng, *sigma), 1: chain_graph(1, tb, rng, *sigma)}
    inliers = []
    for _ in range(int(rng.integers(n_loops[0], n_loops[1] + 1))):
        ka = GlobalKey(0, int(rng.integers(0, na)))
        kb = GlobalKey(1, int(rng.integers(0, nb)))
        inliers.append(inter_edge(truth, ka, kb, rng, *sigma))
    return graphs, inliers, truth
