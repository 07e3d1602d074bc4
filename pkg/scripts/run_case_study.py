"""Full closed-loop case study: data, diffusion, normalizers, shift tables, runs, sweep, timing and report.

Every stage caches under ``--out``, so an interrupted run resumes where it stopped.
"""
import argparse
import sys
from pathlib import Path

from shiftsafe.harness.cli import main


def run(argv) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/case_study")
    p.add_argument("--config", default="configs/case_study.json")
    p.add_argument("--episodes", type=int, help="episodes per env and case (config value by default)")
    args = p.parse_args(argv)
    common = ["--out", args.out, "--config", args.config]
    run_args = ["--episodes", str(args.episodes)] if args.episodes else []
    train = [] if (Path(args.out) / "model.json").exists() else [["train-diffusion"]]
    for cmd in (["gen-data"], *train, ["fit-sigma"], ["estimate-shift"],
                ["run", "--resume", "--case", "0", "2", "3", *run_args], ["sweep-w2"], ["timing", "--K", "1000"]):
        print("==>", " ".join(cmd), flush=True)
        main(["-v", cmd[0], *common, *cmd[1:]])
    return main(["report", *common, "--gate"])


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
