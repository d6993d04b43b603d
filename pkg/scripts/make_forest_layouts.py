"""Regenerate the shipped forest layouts in ``src/snmmplan/data``."""

from pathlib import Path

from snmmplan import io
from snmmplan.experiments import LAYOUT_SEEDS, forest_layout

DATA = Path(__file__).resolve().parents[1] / "src" / "snmmplan" / "data"


def main():
    for variant, seed in LAYOUT_SEEDS.items():
        field = forest_layout(variant, seed)
        path = io.write_json(DATA / f"forest_{variant.lower()}.json", {"seed": seed, **field.to_dict()})
        print(f"{path}: {len(field.obstacles)} trees")


if __name__ == "__main__":
    main()
