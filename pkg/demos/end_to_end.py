"""Synthetic data to forecasts in one script.

Generates a small synthetic dataset, ingests it, trains one short run and
prints test metrics next to the baselines, then forecasts the last hours.

    python demos/end_to_end.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from twgcn.ingest import ingest
from twgcn.synth import SynthConfig, write_sources
from twgcn.train import Checkpoint, ExperimentConfig, forecast, run_experiment


def main(out_dir: Path) -> None:
    write_sources(SynthConfig(n_stations=10, n_hours=14 * 24), out_dir)
    panels, report = ingest(*(out_dir / f"{n}.csv" for n in ("sessions", "traffic", "weather", "poi")))
    print(f"{len(panels)} stations x {panels.n_hours} hours, {report['panels']['hours_dropped']} hours dropped")

    config = ExperimentConfig(model_kind="1DCNN", seq_length=8, num_clusters=2, alpha=0.66, num_epochs=60)
    run = run_experiment(config, panels)
    print(f"\n{'model':<12}{'RMSE':>8}{'MAE':>8}   (standardised kWh, test split)")
    rows = [("dual-gcn", run.metrics["normalized"])]
    rows += [(name, m["normalized"]) for name, m in run.baselines.items()]
    for name, m in rows:
        print(f"{name:<12}{m.rmse:>8.3f}{m.mae:>8.3f}")
    print("\nregions:", dict(zip(panels.station_ids, run.fit.assignments.tolist())))

    pred = forecast(Checkpoint.from_run(run), panels, horizon=2)
    print("\nlast forecasts (kWh):")
    print(pred.head(6).to_string(index=False))


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
