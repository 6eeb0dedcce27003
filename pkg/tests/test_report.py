import csv

import pytest

from calmix.bench import MetricRecord, append_jsonl, minmax_normalize
from calmix.report import FOOTER, build_report, collect_rows, relative_change_rows, render_scatter_svg


def _rec(setting, top1, t, sps, seed=0, dataset="birds", backbone="tiny", size=224):
    return MetricRecord(top1=top1, train_time_min=t, throughput_sps=sps, config_id=f"{dataset}-{backbone}-{setting}",
                        seed=seed, dataset=dataset, backbone=backbone, setting=setting, image_size=size)


def _write(path, records):
    for r in records:
        append_jsonl(path, r.to_dict())


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_two_records_normalize_and_relative_change(tmp_path):
    records = [_rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 4.0, 40.0)]
    _write(tmp_path / "results.jsonl", records)
    build_report(tmp_path)
    rows = {r["setting"]: r for r in _read_csv(tmp_path / "report" / "birds.csv")}
    assert float(rows["FT"]["top1_norm"]) == 0.0 and float(rows["CAL"]["top1_norm"]) == 1.0
    table = relative_change_rows(collect_rows(records)["birds"])
    assert ("tiny", 224, "FT", "CAL", "+60.0%", "+100.0%", "-60.0%") in table
    assert "+60.0%" in (tmp_path / "report" / "report.md").read_text()


def test_single_dataset_outputs(tmp_path):
    _write(tmp_path / "results.jsonl", [_rec("FT", 0.5, 2.0, 100.0), _rec("FZ", 0.3, 1.0, 120.0)])
    written = build_report(tmp_path)
    assert len([p for p in written if p.suffix == ".csv"]) == 1
    svgs = [p for p in written if p.suffix == ".svg"]
    assert len(svgs) >= 2
    for svg in svgs:
        text = svg.read_text()
        assert text.startswith("<svg") and "href" not in text


def test_normalized_columns_match_oracle(tmp_path):
    records = [_rec(s, a, t, p, seed=k) for k in range(2) for s, a, t, p in
               [("FT", 0.6 + 0.01 * k, 3.0, 90.0), ("CAL", 0.7, 5.0 + k, 45.0), ("FZ", 0.4, 1.0, 95.0 - k)]]
    _write(tmp_path / "results.jsonl", records)
    build_report(tmp_path)
    rows = _read_csv(tmp_path / "report" / "birds.csv")
    for raw, norm in (("top1", "top1_norm"), ("train_time_min", "train_time_norm"), ("throughput_sps", "throughput_norm")):
        values = [float(r[raw]) for r in rows]
        got = [float(r[norm]) for r in rows]
        assert all(0.0 <= v <= 1.0 for v in got)
        assert got == pytest.approx(minmax_normalize(values), abs=1e-12)
    assert {r["runs"] for r in rows} == {"2"}


def test_constant_column_normalizes_to_zero(tmp_path):
    _write(tmp_path / "r.jsonl", [_rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 2.0, 100.0)])
    build_report(tmp_path)
    rows = _read_csv(tmp_path / "report" / "birds.csv")
    assert {r["train_time_norm"] for r in rows} == {"0.0"}
    assert FOOTER in (tmp_path / "report" / "report.md").read_text()


def test_rerun_supersedes_earlier_record(tmp_path):
    _write(tmp_path / "r.jsonl", [_rec("FT", 0.1, 2.0, 100.0), _rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 3.0, 50.0)])
    build_report(tmp_path)
    ft = [r for r in _read_csv(tmp_path / "report" / "birds.csv") if r["setting"] == "FT"][0]
    assert float(ft["top1"]) == 0.5 and ft["runs"] == "1"


def test_one_csv_per_dataset_and_non_run_records_ignored(tmp_path):
    path = tmp_path / "r.jsonl"
    _write(path, [_rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 3.0, 50.0),
                  _rec("FT", 0.4, 1.0, 10.0, dataset="cars"), _rec("FZ", 0.2, 0.5, 12.0, dataset="cars")])
    append_jsonl(path, {"kind": "aggregate", "top1_mean": 0.9})
    append_jsonl(path, {"kind": "run", "diverged": True, "top1": 0.0, "train_time_min": 0.0,
                        "throughput_sps": 0.0, "config_id": "x", "seed": 0, "dataset": "birds"})
    written = build_report(tmp_path)
    assert sorted(p.name for p in written if p.suffix == ".csv") == ["birds.csv", "cars.csv"]


def test_empty_results(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_report(tmp_path)


def test_refuses_to_clobber(tmp_path):
    _write(tmp_path / "r.jsonl", [_rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 3.0, 50.0)])
    build_report(tmp_path)
    with pytest.raises(FileExistsError):
        build_report(tmp_path)
    first = (tmp_path / "report" / "birds.csv").read_text()
    build_report(tmp_path, overwrite=True)
    assert (tmp_path / "report" / "birds.csv").read_text() == first


def test_svg_has_one_series_per_setting():
    rows = collect_rows([_rec("FT", 0.5, 2.0, 100.0), _rec("CAL", 0.8, 3.0, 50.0), _rec("FZ", 0.2, 1.0, 110.0)])["birds"]
    svg = render_scatter_svg(rows, "train_time_norm", "Training time", "t")
    assert svg.count("<title>") == 3
    for name in ("FT", "CAL", "FZ"):
        assert f">{name}</text>" in svg
