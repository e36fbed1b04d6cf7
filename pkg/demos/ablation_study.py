"""A reduced ablation over the three alignment levels.

Trains one stereo teacher, then the monocular branch once per group:
(a) no alignment, (b) feature level, (c) anchor level, (d) object level,
(e) feature and anchor, (f) all levels. The full-size run used by the
acceptance suite is 200 scenes and 50 epochs; the defaults here finish in
under a minute, with all AP values still low.

    python demos/ablation_study.py [SCENES] [EPOCHS]
"""
import sys

from stereoguide.cli import ablation_table
from stereoguide.trainer import TrainConfig, Workbench, generate_scenes


def main(scenes=60, epochs=15):
    cfg = TrainConfig(epochs=int(epochs), eval_scenes=30)
    bench = Workbench(generate_scenes(cfg.seed, int(scenes)), cfg)
    results = {}
    for g in "abcdef":
        results[g] = bench.run(cfg.group(g))
        print(f"group {g}: AP_BEV {results[g].metrics['ap_bev']:.4f}", file=sys.stderr)
    print(ablation_table(results, bench.teacher_metrics()))


if __name__ == "__main__":
    main(*sys.argv[1:])
