import numpy as np
import pytest

from perspective_retrieval.retrieval import (
    KS,
    RetrievalReport,
    brute_force_oracle,
    compute_report,
    mean_recall,
    read_report_csv,
    reports_to_csv,
    reports_to_markdown,
)


def random_similarity(seed):
    rng = np.random.default_rng(seed)
    n_img = int(rng.integers(1, 21))
    c = int(rng.integers(1, 6))
    S = rng.normal(size=(n_img, n_img * c))
    if seed % 3 == 0:
        S = np.round(S, 1)  # plenty of exact ties
    return S, c


def test_headline_recalls_average():
    rep = RetrievalReport.from_recalls({1: 18.30, 5: 37.42, 10: 50.32}, {1: 13.28, 5: 37.04, 10: 54.73})
    assert abs(rep.mr - 35.18) < 0.005
    assert abs(rep.mr - 211.09 / 6) < 1e-12


def test_perfect_block_matrix():
    S = np.kron(np.eye(4), np.ones((1, 5)))
    for rep in (compute_report(S), brute_force_oracle(S)):
        assert rep.values() == [100.0] * 7


def test_anti_diagonal_worst_case():
    # every query's match is ranked last
    n = 12
    S = np.ones((n, n)) - np.eye(n)
    rep = compute_report(S, captions_per_image=1)
    assert rep.values() == [0.0] * 7
    assert rep == brute_force_oracle(S, captions_per_image=1)


def test_small_random_against_exhaustive_oracle():
    S = np.random.default_rng(0).normal(size=(6, 30))
    assert compute_report(S) == brute_force_oracle(S)


@pytest.mark.parametrize("block", range(4))
def test_matches_oracle_on_200_matrices(block):
    for seed in range(block * 50, block * 50 + 50):
        S, c = random_similarity(seed)
        assert compute_report(S, c).values() == brute_force_oracle(S, c).values(), seed


@pytest.mark.parametrize("seed", range(30))
def test_monotone_transforms_leave_report_unchanged(seed):
    S, c = random_similarity(seed)
    base = compute_report(S, c)
    for f in (np.exp, lambda x: 3.0 * x - 7.0, np.arctan, lambda x: x**3):
        assert compute_report(f(S), c) == base


@pytest.mark.parametrize("seed", range(20))
def test_recall_ordering_and_range(seed):
    S, c = random_similarity(seed)
    rep = compute_report(S, c)
    for r in (rep.text_r, rep.image_r):
        assert 0 <= r[1] <= r[5] <= r[10] <= 100
    assert abs(rep.mr - np.mean(rep.values()[:6])) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_image_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    n, c = 8, 3
    S = rng.normal(size=(n, n * c))
    perm = rng.permutation(n)
    cols = (perm[:, None] * c + np.arange(c)).reshape(-1)
    assert compute_report(S[perm][:, cols], c).values() == compute_report(S, c).values()


def test_ties_break_towards_lower_index():
    # two images score the caption equally; image 0 wins, so caption 0 is found at rank 1
    S = np.array([[0.5, 0.2], [0.5, 0.9]])
    rep = compute_report(S, captions_per_image=1)
    assert rep.image_r[1] == 100.0
    assert rep.rankings["t2i"][0].tolist() == [0, 1]


def test_rejects_inconsistent_shapes():
    with pytest.raises(ValueError):
        compute_report(np.zeros((3, 14)))
    with pytest.raises(ValueError):
        brute_force_oracle(np.zeros(5))


def test_mean_recall():
    assert mean_recall({k: 10.0 for k in KS}, {k: 40.0 for k in KS}) == 25.0


def test_csv_and_markdown_output():
    rep = RetrievalReport.from_recalls({1: 50.0, 5: 75.0, 10: 100.0}, {1: 25.0, 5: 50.0, 10: 75.0})
    rows = [({"Attn": True, "Gate": False, "note": 'a "quoted", value'}, rep)]
    text = reports_to_csv(rows)
    assert text.endswith("\r\n") and '"a ""quoted"", value"' in text
    header, parsed = read_report_csv(text)
    assert header[:3] == ["Attn", "Gate", "note"]
    assert parsed[0]["note"] == 'a "quoted", value' and parsed[0]["mR"] == "62.50"
    md = reports_to_markdown(rows)
    assert "| ✓ | × |" in md and "62.50" in md
    assert md.splitlines()[0].endswith("| Text R@1 | Text R@5 | Text R@10 | Image R@1 | Image R@5 | Image R@10 | mR |")
