import pytest

from phenoyield.config import load_config
from phenoyield.datagen import GenConfig, generate_dataset

# 4 crops x 4 counties x (2 train + 1 test) years on 8x8 frames
SMALL_GEN = dict(H=8, W=8, n_counties=4)
SMALL_MODEL = {"d": 16, "patch_size": 4, "heads": 2, "adapter_hidden": 16, "head_hidden": 16}


def small_config(**overrides):
    raw = {"seed": 0, "model": dict(SMALL_MODEL),
           "pretrain": {"epochs": 2, "warmup_epochs": 1},
           "finetune": {"epochs": 3, "warmup_epochs": 1}}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return load_config(None, raw)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(GenConfig(**SMALL_GEN), seed=1)


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
