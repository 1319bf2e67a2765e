import pytest

from core import ModelConfig, RunConfig, apply_overrides, make_rng, synth_dataset
from core.imagecore import unit_image

# subjects 1-2 train, 3 calib, 4 test
TINY_PROTOCOL = """\
name: tiny
train: {subject_id: {le: 2}}
calib: {subject_id: 3}
test: {subject_id: 4}
"""


@pytest.fixture
def tiny_model_config():
    return ModelConfig(image_size=16, patch_size=8, depth=3, embed_dim=16, heads=2, dtype="float64")


@pytest.fixture
def random_image():
    def make(size=16, seed=0):
        return unit_image(make_rng(seed).random((size, size, 3)))
    return make


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 subjects x 2 frames of 16 x 16 images, with a protocol file next to the manifest."""
    root = tmp_path_factory.mktemp("corpus")
    synth_dataset(4, 2, make_rng(0), root, image_size=16)
    (root / "tiny.yaml").write_text(TINY_PROTOCOL, encoding="utf-8")
    return root


@pytest.fixture
def tiny_run_config(tiny_corpus):
    return apply_overrides(RunConfig(), [
        "model.image_size=16", "model.patch_size=8", "model.depth=3", "model.embed_dim=16", "model.heads=2",
        "train.epochs=2", "train.batch_size=4", "train.learning_rate=0.01",
        "data.n_subjects=4", "data.frames_per_subject=2", f"data.protocol={tiny_corpus / 'tiny.yaml'}",
    ])


def brute_force_metrics(scores, labels, attacks, threshold):
    """Reference counting loop used as an oracle for the vectorized metrics."""
    per_attack = {}
    live_total = live_rejected = 0
    for s, label, attack in zip(scores, labels, attacks):
        if label == "LIVE":
            live_total += 1
            live_rejected += s < threshold
        else:
            n, acc = per_attack.get(attack, (0, 0))
            per_attack[attack] = (n + 1, acc + (s >= threshold))
    rates = {a: acc / n for a, (n, acc) in per_attack.items()}
    apcer = max(rates.values())
    bpcer = live_rejected / live_total
    return rates, apcer, bpcer, (apcer + bpcer) / 2


@pytest.fixture
def metrics_oracle():
    return brute_force_metrics
