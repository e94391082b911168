import pytest

from dri_iqa.config import TrainConfig
from dri_iqa.data import read_manifest, synthesize_iqa_dataset, toy_corpus

TINY = dict(
    dim=16, encoder_widths=(8, 8, 8, 8), restorer_widths=(8, 8, 8, 8, 8, 8),
    width=16, heads=2, crop=32, n_crops=2, lr=1e-3, t_max=4.0,
)


def tiny_config(stage=1, **changes):
    base = dict(TINY, stage=stage, batch=4, epochs=2)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return toy_corpus(8, 48, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    synthesize_iqa_dataset(root, n_refs=4, per_ref=3, size=48, seed=5)
    return root, read_manifest(root / "manifest.csv")


# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
