"""Every error model on one stream, next to the published comparison.

Runs the seven configurations (Gaussian, DCS, cDCE, SM+EM, SM+VBI,
SM+EM+CL and IVM) on the urban scenario and prints an ATE / runtime table in
the same layout as the published one, which is printed first for reference.
The published numbers come from real urban datasets and are not expected to
match the synthetic run; the ordering is what carries over.

    python3 demos/compare_models.py
"""

from pathlib import Path

from ivmix.evaluation import compare, parse_comparison_csv, read_truth, ate_of_results
from ivmix.pipeline import MODELS, PipelineConfig, run
from ivmix.sim import generate, load_scenario, merge_stream, split_truth

HERE = Path(__file__).parent
PUBLISHED = HERE.parent / "tests" / "data" / "published_comparison.csv"


def main():
    print("published (real datasets):")
    print(parse_comparison_csv(PUBLISHED.read_text()).to_text())

    records, truth = generate(load_scenario((HERE / "scenarios" / "urban.ini").read_text()))
    meas, gt = split_truth(merge_stream(records, truth))
    t, xy = read_truth(gt)
    runs = {m: {"urban": ate_of_results(run(meas, PipelineConfig(model=m)), t, xy)} for m in MODELS}
    print("\nthis run (synthetic urban scenario, * = best):")
    print(compare(runs).to_text())


if __name__ == "__main__":
    main()
