import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from artidiff.model import JointSpec, LinkSpec, RobotModel, Shape


def random_model(n, rng, floating=False, tree=False, shapes=False):
    """Random chain or tree of ``n`` links with mixed joint kinds."""
    links = []
    kinds = ["revolute", "prismatic", "fixed"]
    for i in range(n):
        kind = "floating_base" if (i == 0 and floating) else kinds[rng.choice(3, p=[0.6, 0.25, 0.15])]
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        joint = JointSpec.make(kind, axis=axis,
                               xyz=rng.uniform(-0.5, 0.5, 3) if i else np.zeros(3),
                               rpy=rng.uniform(-1, 1, 3) if i else np.zeros(3),
                               damping=rng.uniform(0, 0.5))
        B = rng.standard_normal((3, 3))
        inertia = 0.1 * B @ B.T + 0.05 * np.eye(3)
        parent = None if i == 0 else (int(rng.integers(0, i)) if tree else i - 1)
        coll = (Shape("sphere", radius=0.05),) if shapes else ()
        links.append(LinkSpec(f"l{i}", parent, joint, rng.uniform(0.5, 2), rng.uniform(-0.3, 0.3, 3),
                              inertia, coll))
    return RobotModel(tuple(links))


def random_state(model, rng):
    q = rng.uniform(-1, 1, model.nq)
    if model.floating:
        q[3:7] = Rotation.random(random_state=int(rng.integers(1 << 30))).as_quat()
    return q, rng.uniform(-1, 1, model.nv), rng.uniform(-1, 1, model.nu)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
