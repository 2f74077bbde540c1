from dataclasses import replace

import pytest

from coarseem.config import DataConfig, RunConfig, write_config
from coarseem.synthgen import GenConfig


def tiny_config() -> RunConfig:
    cfg = RunConfig()
    base = replace(
        cfg.baseline, width=4, finetune_epochs=2, posterior_epochs=2, kp_epochs=1, kp_warmup_epochs=1,
        kp_finetune_epochs=2, multitask_epochs=2, pseudosup_epochs=2, pointsup_epochs=2, b=4, b_p=2,
    )
    return RunConfig(
        data=DataConfig(gen=GenConfig(H=16, W=16), n_part=4, n_coarse=8, n_val=3, n_test=3),
        width=4,
        em=replace(cfg.em, epochs=2, b=4, b_p=2),
        baseline=base,
        eval=cfg.eval,
    )


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    write_config(tiny_config(), path)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
