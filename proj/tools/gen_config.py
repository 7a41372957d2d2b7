#!/usr/bin/env python3
"""Generate openevt config files for the bundled example instances.

Writes JSON to stdout; pipe into a file and run `openevt validate` on
it to see the classification and feasibility diagnostics.
"""

import argparse
import json
import sys

PRESETS = {
    # Doubling map with hole [0, 1/4): exactly solvable, the target
    # 1/3 sits on a period-2 orbit of the survivor set.
    "golden": {
        "map": {"builtin": "doubling"},
        "hole": [[0.0, 0.25]],
        "z": 1.0 / 3.0,
        "tau_grid": [0.5, 1.0, 2.0],
        "n_values": [4, 8, 16, 32],
        "bins": 4096,
        "markov_mode": True,
    },
    # No hole: alpha = 1, dimension 1 control case.
    "closed": {
        "map": {"builtin": "doubling"},
        "hole": [],
        "z": 0.37,
        "tau_grid": [1.0],
        "n_values": [2, 4, 8],
        "bins": 256,
        "markov_mode": True,
    },
    # Target inside the hole: degenerate limit branch.
    "degenerate": {
        "map": {"builtin": "doubling"},
        "hole": [[0.0, 0.25]],
        "z": 0.1,
        "tau_grid": [1.0],
        "n_values": [2, 5, 20, 50, 60],
        "bins": 4096,
        "markov_mode": True,
    },
    # Three full linear branches with distinct slopes and a
    # nonperiodic target. (A periodic target on this map needs smaller
    # return radii than the driver's defaults: the steeper branches
    # re-cover the target ball within eight lags, tripping the return
    # stability gate.)
    "three_branch": {
        "map": {"builtin": "linear_markov", "slopes": [2.0, 4.0, 4.0]},
        "hole": [[0.5, 0.5625]],
        "z": 0.2973,
        "tau_grid": [1.0, 2.0],
        "n_values": [4, 8, 16],
        "bins": 2048,
        "markov_mode": True,
    },
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("preset", choices=sorted(PRESETS))
    parser.add_argument("--pipeline", default="all",
                        choices=["spectral", "evd", "theta", "dimension",
                                 "degenerate", "all"])
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--particles", type=int, default=100000)
    parser.add_argument("--bins", type=int, default=None,
                        help="override the preset's partition size")
    parser.add_argument("--z", type=float, default=None,
                        help="override the preset's target point")
    parser.add_argument("--out-dir", default=None,
                        help="embed a default output directory")
    args = parser.parse_args()

    cfg = dict(PRESETS[args.preset])
    cfg["n_particles"] = args.particles
    cfg["seed"] = args.seed
    cfg["pipeline"] = args.pipeline
    if args.bins is not None:
        cfg["bins"] = args.bins
    if args.z is not None:
        cfg["z"] = args.z
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir

    json.dump(cfg, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
