import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bftinfer.crypto import KeyPair  # noqa: E402
from bftinfer.distance import DistanceDescriptor, Metric  # noqa: E402
from bftinfer.domain import ClusterConfig, ModelGroup  # noqa: E402
from bftinfer.inference import LinearToyModel, ModelStore  # noqa: E402

# acceptance lines collected during the session, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def make_config(n=4, f=None, **params) -> tuple[ClusterConfig, list[KeyPair]]:
    keys = sorted((KeyPair.from_seed(b"t-node-%d" % i) for i in range(n)), key=lambda k: k.public_key)
    f = (n - 1) // 3 if f is None else f
    return ClusterConfig.build([(k.public_key, f"sim://{i}") for i, k in enumerate(keys)], f, **params), keys


def make_group(store: ModelStore, group_id="g", version=1, models=4, in_dim=3, out_dim=2, seed=0,
               distance=DistanceDescriptor(Metric.CHEBYSHEV, 0.1), softmax=False) -> ModelGroup:
    rng = random.Random(f"{group_id}/{version}/{seed}")
    descs = []
    for m in range(models):
        model = LinearToyModel.random(rng, in_dim, out_dim, softmax=softmax)
        url = f"mem://{group_id}/v{version}/m{m}"
        store.put(url, model.to_bytes())
        descs.append(model.describe(url))
    return ModelGroup(group_id, version, tuple(descs), distance)


@pytest.fixture
def store():
    return ModelStore()
