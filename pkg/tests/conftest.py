import json

import pytest

from reprgap import zoo as Z

TINY_GRID = {"width": [4, 6], "depth": [1], "batch_size": [32], "dropout": [0.0], "weight_decay": [0.0],
             "label_noise": [0.0, 0.5]}


def tiny_zoo_config() -> dict:
    cfg = Z.ZooConfig(grid=TINY_GRID,
                      data=Z.DataSpec(num_classes=2, train_size=64, test_size=64, synth=Z.SynthConfig(image_size=12)),
                      training=Z.TrainSpec(max_epochs=150))
    return cfg.to_dict()


@pytest.fixture(scope="session")
def tiny_zoo(tmp_path_factory):
    """A 4-model zoo on 12x12 two-class images, built once per session."""
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "zoo.json"
    cfg_path.write_text(json.dumps(tiny_zoo_config()))
    Z.build_zoo(Z.read_config(cfg_path), root / "zoo")
    return root / "zoo"


# criterion number -> (passed, description, detail); filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {desc}" + (f" [{detail}]" if detail else ""))
