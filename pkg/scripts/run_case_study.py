"""Run the full case study through the CLI: synthesize, simulate both observers, verify.

Usage: python3 scripts/run_case_study.py [OUT_DIR]
"""
import sys
from pathlib import Path

from polyobs import cases, cli


def run(*argv):
    code = cli.main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"polyobs {argv[0]} exited with code {code}")


def main(out="case_study_out"):
    out = Path(out)
    model = cases.fixture("example1.json")
    run("synth", model, "--weights", "1,5,0.01", "--out", out / "synth")
    cert = out / "synth" / "certificate.json"
    for obs in (1, 2):
        sim = out / f"observer{obs}"
        run("simulate", model, cert, cases.fixture(f"paper_sec54_obs{obs}.json"), "--out", sim)
        run("verify", model, cert, sim / "trajectory.csv", "--suite", "all",
            "--manifest", sim / "manifest.json", "--out", sim)
    print(f"artifacts written to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
