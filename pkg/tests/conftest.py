import numpy as np
import pytest
import torch

from vcground import synthworld as sw
from vcground.data import prepare
from vcground.language import Vocabulary, tokenize
from vcground.scene import BBox, FeatureConfig, Region, Scene, build_features
from vcground.scoring import ModelConfig
from vcground.train import init_params

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def world():
    return sw.WorldConfig()


@pytest.fixture(scope="session")
def vocab(world):
    return Vocabulary.build(sw.vocabulary_words(world))


def random_scene(n: int, dv: int, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    regions = []
    for k in range(n):
        x0, y0 = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(5, 35, size=2)
        regions.append(
            Region(BBox(x0, y0, x0 + w, y0 + h), rng.normal(size=dv), category_id=int(k % 2))
        )
    return build_features(Scene(f"rand{seed}", 100.0, 100.0, regions), FeatureConfig())


@pytest.fixture
def fixture_model(vocab):
    """N=5 regions, one 8-token expression, desk dims with a small encoder."""
    scene = random_scene(5, 16, seed=11)
    X = torch.as_tensor(scene.feature_matrix())
    tokens = ["the", "large", "dark", "circle", "left", "of", "the", "square"]
    expr = tokenize(tokens, vocab, 20, referent_idx=2)
    mcfg = ModelConfig(vocab_size=len(vocab), region_dim=X.shape[1], d_w=32, hidden_size=64, layers=2)
    params = init_params(mcfg, seed=5)
    return X, [expr], params, mcfg


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion, printed at the end
# ---------------------------------------------------------------------------

_CRITERIA: dict[str, tuple[bool, str]] = {}
_UNIT_OUTCOMES = {"passed": 0, "failed": 0}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    _CRITERIA[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        return
    if report.failed:
        _UNIT_OUTCOMES["failed"] += 1
    elif report.when == "call" and report.passed:
        _UNIT_OUTCOMES["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = _CRITERIA[key]
        tr.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    n_pass, n_fail = _UNIT_OUTCOMES["passed"], _UNIT_OUTCOMES["failed"]
    if n_pass + n_fail:
        status = "PASS" if n_fail == 0 else "FAIL"
        tr.write_line(f"criterion 9: {status}  operation examples and oracle checks: {n_pass} passed, {n_fail} failed")
    else:
        tr.write_line("criterion 9: NOT RUN  unit modules were not collected in this session")
