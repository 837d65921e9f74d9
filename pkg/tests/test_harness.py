import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octofuse.data import generate_synthetic
from octofuse.errors import ConfigurationError
from octofuse.fusion import FusionStrategy
from octofuse.harness import (
    Cell,
    CellResult,
    ExperimentConfig,
    ExperimentReport,
    RawEntry,
    compare_fusion,
    job_seed,
    kfold_split,
    load_report,
    parse_markdown_table,
    read_raw_csv,
    render_report,
    run_experiment,
    save_report,
)
from octofuse.training import TrainConfig

QUICK = TrainConfig(epochs=1, batch_size=4)


def tiny_config(**kw):
    base = dict(
        cells=[Cell.parse("densenet/octopus")],
        generate=dict(seed=0, volumes=4, modalities=2, dims=[2, 16, 16], noise=0.05, polarity="+,-"),
        folds=2,
        repeats=1,
        train=QUICK,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def fixture_report(values, family_of=lambda cell: cell.split("/")[0]):
    """``values``: {(cell, label): {class: fold-0 dice}}, one fold, one repeat."""
    cells = []
    for (cell, label), per_class in values.items():
        entries = [RawEntry(cell, 0, 0, c, d) for c, d in per_class.items()]
        cells.append(CellResult(cell, label, family_of(cell), entries))
    return ExperimentReport(cells)


# -- folds and seeds ------------------------------------------------------------


def test_kfold_ten_into_five():
    folds = kfold_split(list(range(10)), 5, seed=0)
    assert [len(f.val_ids) for f in folds] == [2] * 5
    assert sorted(itertools.chain.from_iterable(f.val_ids for f in folds)) == list(range(10))
    assert kfold_split(list(range(10)), 5, seed=0) == folds
    assert kfold_split(list(range(10)), 5, seed=1) != folds


def test_kfold_eleven_into_five():
    assert sorted(len(f.val_ids) for f in kfold_split(list(range(11)), 5, 3)) == [2, 2, 2, 2, 3]


def test_kfold_too_few():
    with pytest.raises(ConfigurationError):
        kfold_split([1, 2], 3, 0)


@settings(max_examples=80, deadline=None)
@given(n=st.integers(2, 60), k=st.integers(2, 10), seed=st.integers(0, 2**32 - 1))
def test_kfold_partition_property(n, k, seed):
    if n < k:
        return
    folds = kfold_split(list(range(n)), k, seed)
    vals = [set(f.val_ids) for f in folds]
    assert set().union(*vals) == set(range(n))
    assert sum(len(v) for v in vals) == n
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for f in folds:
        assert set(f.train_ids) == set(range(n)) - set(f.val_ids)


def test_job_seeds_pairwise_distinct():
    cells = ["densenet/single:0", "densenet/early", "densenet/late", "densenet/octopus", "densenet/octopus+ds"]
    seeds = [job_seed(0, c, f, r) for c in cells for f in range(5) for r in range(3)]
    assert len(set(seeds)) == len(seeds)
    assert job_seed(0, cells[0], 0, 0) == job_seed(0, cells[0], 0, 0)
    assert job_seed(1, cells[0], 0, 0) != job_seed(0, cells[0], 0, 0)


# -- configuration ----------------------------------------------------------------


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(train=TrainConfig(lr0=0.1, epochs=3))
    import yaml

    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg.to_dict()))
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_config(folds=1)
    with pytest.raises(ConfigurationError):
        tiny_config(repeats=0)
    with pytest.raises(ConfigurationError):
        tiny_config(cells=[Cell.parse("alexnet/early")])
    with pytest.raises(ConfigurationError):
        tiny_config(data_path="x")
    with pytest.raises(ConfigurationError):
        Cell.parse("early")


def test_invalid_strategy_for_dataset():
    with pytest.raises(ConfigurationError):
        run_experiment(tiny_config(cells=[Cell("densenet", FusionStrategy("single", 5))]))


# -- running ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    report = run_experiment(tiny_config(output_dir=str(out)))
    return report, out


def test_smoke_run(smoke):
    report, out = smoke
    cell = report.cell("densenet/octopus")
    assert len(cell.entries) == 2 and not cell.failed
    assert cell.mean == pytest.approx(np.mean([e.dice for e in cell.entries]), abs=1e-15)
    assert (out / "raw.csv").exists() and (out / "report.json").exists()


def test_aggregation_matches_raw_csv(smoke):
    report, out = smoke
    with open(out / "raw.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["cell", "fold", "repeat", "class", "dice"]
    # independent aggregation: mean over repeats of the mean over folds, then over classes
    by = {}
    for r in rows:
        by.setdefault((r["cell"], int(r["class"]), int(r["repeat"])), []).append(float(r["dice"]))
    per_class = {}
    for (cell, cls, _), v in by.items():
        per_class.setdefault((cell, cls), []).append(sum(v) / len(v))
    cells = {}
    for (cell, _), v in per_class.items():
        cells.setdefault(cell, []).append(sum(v) / len(v))
    for c in report.cells:
        assert c.mean == sum(cells[c.cell]) / len(cells[c.cell])


def test_report_persistence_round_trip(smoke, tmp_path):
    report, out = smoke
    back = load_report(out)
    assert [(c.cell, c.mean) for c in back.cells] == [(c.cell, c.mean) for c in report.cells]
    save_report(back, tmp_path)
    assert (tmp_path / "raw.csv").read_bytes() == (out / "raw.csv").read_bytes()
    assert read_raw_csv(out / "raw.csv") == report.raw_entries()


def test_rerun_is_bit_identical(smoke, tmp_path):
    _, out = smoke
    run_experiment(tiny_config(output_dir=str(tmp_path)))
    assert (tmp_path / "raw.csv").read_bytes() == (out / "raw.csv").read_bytes()


def test_failed_cell_is_recorded_and_run_continues(tmp_path):
    # an enormous step size diverges the multi-modal cells
    cfg = tiny_config(
        cells=[Cell.parse("densenet/octopus"), Cell.parse("densenet/early")],
        train=TrainConfig(lr0=1e100, momentum=0.0, epochs=2, batch_size=4),
    )
    with np.errstate(all="ignore"):
        report = run_experiment(cfg)
    assert all(c.failed and "TrainingError" in c.error for c in report.cells)
    text = render_report(report)
    assert text.count("—") == 2


# -- rendering ----------------------------------------------------------------------

TABLE2 = {
    ("vgg/octopus", "Octopus-fusion"): {1: 0.5571},
    ("resnet/octopus", "Octopus-fusion"): {1: 0.5733},
    ("densenet/octopus", "Octopus-fusion"): {1: 0.5772},
    ("densenet/octopus+ds", "Octopus-fusion + deep supervision"): {1: 0.5790},
}


def test_backbone_table_fixture_row():
    text = render_report(fixture_report(TABLE2))
    header, rows = parse_markdown_table(text)
    assert header == ["", "vgg", "resnet", "densenet"]
    assert "| Octopus-fusion | 55.71 | 57.33 | 57.72 |" in text
    assert "| Octopus-fusion + deep supervision | — | — | 57.90 |" in text
    assert rows["Octopus-fusion + deep supervision"][:2] == [None, None]


def test_class_table_average_column():
    report = fixture_report({("densenet/octopus", "Octopus-fusion"): {1: 0.8059, 2: 0.8212, 3: 0.8605}})
    text = render_report(report, style="classes", class_names=["CSF", "Gray matter", "White matter"])
    assert "| Octopus-fusion | 80.59 | 82.12 | 86.05 | 82.92 |" in text
    header, rows = parse_markdown_table(text)
    assert header[-1] == "Ave. Dice"
    assert rows["Octopus-fusion"][3] == pytest.approx(np.mean(rows["Octopus-fusion"][:3]), abs=5e-5)


def test_empty_report_is_header_only():
    text = render_report(ExperimentReport())
    assert text.strip().splitlines() == ["|  |", "|---|"]
    assert render_report(ExperimentReport(), format="csv").strip() == '""'


def test_csv_rendering():
    text = render_report(fixture_report(TABLE2), format="csv")
    rows = list(csv.reader(text.splitlines()))
    assert rows[0] == ["", "vgg", "resnet", "densenet"]
    assert rows[1] == ["Octopus-fusion", "55.71", "57.33", "57.72"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6))
def test_markdown_round_trip_within_half_a_hundredth(values):
    report = fixture_report({(f"densenet/single:{i}", f"row{i}"): {1: v} for i, v in enumerate(values)})
    _, rows = parse_markdown_table(render_report(report))
    for i, v in enumerate(values):
        assert abs(rows[f"row{i}"][0] - v) <= 0.005 + 1e-12


def test_unknown_format():
    with pytest.raises(ConfigurationError):
        render_report(ExperimentReport(), format="html")


# -- fusion comparison ---------------------------------------------------------------


@pytest.fixture(scope="module")
def comparison():
    cfg = tiny_config(generate=dict(seed=1, volumes=4, modalities=3, dims=[2, 16, 16], noise=0.05, polarity="+,-,+"))
    return compare_fusion(cfg)


def test_comparison_row_set(comparison):
    labels = [label for label, _ in comparison.rows]
    b = comparison.best_modality
    assert labels == [
        f"Single modality (m{b})",
        "Early-fusion",
        "Late-fusion",
        "Octopus-fusion",
        "Octopus-fusion + deep supervision",
    ]
    assert set(comparison.single_scores) == {0, 1, 2}
    assert comparison.single_scores[b] == max(comparison.single_scores.values())
    assert all(math.isfinite(v) for _, v in comparison.rows)


def test_comparison_deltas_antisymmetric(comparison):
    for (a, b), d in comparison.deltas.items():
        assert d == -comparison.deltas[(b, a)]
    assert len(comparison.deltas) == 5 * 4
    assert "| Octopus-fusion |" in comparison.to_markdown()


def test_comparison_needs_two_modalities():
    cfg = tiny_config(generate=dict(seed=1, volumes=4, modalities=1, dims=[2, 16, 16], polarity="+"))
    with pytest.raises(ConfigurationError):
        compare_fusion(cfg)
