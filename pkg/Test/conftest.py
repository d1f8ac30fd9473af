import numpy as np
import pytest

from Scripts.data_handler import SyntheticSpec, gen_synthetic, partition_iid
from Scripts.history_store import HistoryStore, RoundRecord, StorageConfig
from Scripts.numerics import Dataset, LocalTrainConfig, ModelArch
from Scripts.orchestrator import RoundOutcome, aggregate


@pytest.fixture
def logreg_arch():
    return ModelArch("logreg", input_dim=4, hidden_dim=0, num_classes=3)


@pytest.fixture
def mlp_arch():
    return ModelArch("mlp1", input_dim=4, hidden_dim=5, num_classes=3)


@pytest.fixture
def toy_data():
    return gen_synthetic(SyntheticSpec(num_classes=3, input_dim=4,
                                       samples_per_class=20, pattern_size=1,
                                       separation=0.6, seed=3))


@pytest.fixture
def client_datasets(toy_data):
    return partition_iid(toy_data, 4, seed=5)


@pytest.fixture
def refset(toy_data):
    return toy_data.subset(np.arange(10), owner="refset")


@pytest.fixture
def local_cfg():
    return LocalTrainConfig(epochs=1, learning_rate=0.1, batch_size=8)


@pytest.fixture
def storage_factory(refset):
    def build(alpha=0.1, round_ratio=1.0, client_ratio=1.0):
        return StorageConfig(alpha=alpha, round_ratio=round_ratio,
                             client_ratio=client_ratio, refset=refset)
    return build


@pytest.fixture
def make_outcome():
    """
    RoundOutcome from explicit updates; sizes default to 1 per client.
    """
    def build(t, updates, model, loss, sizes=None):
        updates = {c: np.asarray(u, dtype=np.float64)
                   for c, u in updates.items()}
        sizes = sizes or {c: 1 for c in updates}
        return RoundOutcome(round=t, global_model=np.asarray(
                                model, dtype=np.float64),
                            updates=updates,
                            aggregate=aggregate(updates, sizes), loss=loss,
                            sizes=sizes)
    return build


@pytest.fixture
def make_record():
    def build(t, updates, sizes=None, model=None):
        updates = {c: np.asarray(u, dtype=np.float64)
                   for c, u in updates.items()}
        sizes = sizes or {c: 1 for c in updates}
        clients = tuple(sorted(updates))
        agg = aggregate(updates, sizes)
        return RoundRecord(round=t,
                           model=agg.copy() if model is None else model,
                           client_ids=clients, updates=updates,
                           aggregate=agg, sizes=sizes)
    return build


@pytest.fixture
def tiny_store(storage_factory):
    """
    An empty selective store over a 4-parameter logreg (d=1, K=2).
    """
    arch = ModelArch("logreg", input_dim=1, hidden_dim=0, num_classes=2)
    refset = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]), "refset")
    config = StorageConfig(alpha=0.1, round_ratio=1.0, client_ratio=1.0,
                           refset=refset)
    return HistoryStore(config, arch)
