"""Regenerate the bundled JSON fixtures in src/polyobs/data."""

import json
from pathlib import Path

from polyobs import cases
from polyobs.model import save_model

DATA = Path(__file__).resolve().parents[1] / "src" / "polyobs" / "data"


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    save_model(cases.example_model(), DATA / "example1.json")
    save_model(cases.constant_descriptor_model(), DATA / "example1_constE.json")
    (DATA / "example1_continuous.json").write_text(
        json.dumps(cases.continuous_document(), indent=2) + "\n", encoding="utf-8")
    for k in (1, 2):
        cases.case_study_scenario(k).save(DATA / f"paper_sec54_obs{k}.json")
    print(f"wrote fixtures to {DATA}")


if __name__ == "__main__":
    main()
