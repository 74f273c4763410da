import numpy as np
import pytest

from bundlenat.data import GenerationInstance
from bundlenat.evaluation import (
    BPRBaseline,
    EvalReport,
    PopularityBaseline,
    emit_report,
    latency_account,
    method_result,
    precision_at_k,
    precision_plus_at_k,
    read_report,
    recall_at_k,
)
from bundlenat.exceptions import ContractError
from bundlenat.pretrain import PreferenceEmbeddings

from test_training import _model, _toy


def random_pairs(seed, n=1000, n_items=30, k=5):
    rng = np.random.default_rng(seed)
    pred, truth = [], []
    for _ in range(n):
        pred.append(rng.choice(n_items, k, replace=False).tolist())
        truth.append(rng.choice(n_items, k, replace=False).tolist())
    return pred, truth


# set-arithmetic oracles, written independently of the library code
def oracle_precision(pred, truth, member=False):
    hits = 0
    for p, t in zip(pred, truth):
        hits += (p[0] in t) if member else (p[0] == t[0])
    return hits / len(pred)


def oracle_precision_plus(pred, truth):
    return sum(1 for p, t in zip(pred, truth) if set(p).intersection(t)) / len(pred)


def oracle_recall(pred, truth, k):
    return sum(len(set(p).intersection(t)) for p, t in zip(pred, truth)) / (k * len(pred))


class TestMetrics:
    def test_identity(self):
        truth = [[1, 2, 3], [4, 5, 6]]
        assert precision_at_k(truth, truth) == 1.0
        assert precision_plus_at_k(truth, truth) == 1.0
        assert recall_at_k(truth, truth, 3) == 1.0

    def test_first_match_vs_member(self):
        pred, truth = [[2, 9, 8]], [[1, 2, 3]]
        assert precision_at_k(pred, truth, "first-match") == 0.0
        assert precision_at_k(pred, truth, "member") == 1.0

    def test_disjoint_and_single_overlap(self):
        assert precision_plus_at_k([[1, 2]], [[3, 4]]) == 0.0
        assert precision_plus_at_k([list(range(20))], [list(range(19, 39))]) == 1.0

    def test_partial_recall(self):
        assert recall_at_k([[1, 2, 7, 8, 9]], [[1, 2, 3, 4, 5]], 5) == 0.4

    @pytest.mark.parametrize("seed", range(3))
    def test_oracles_exact(self, seed):
        pred, truth = random_pairs(seed)
        assert precision_at_k(pred, truth) == pytest.approx(oracle_precision(pred, truth), abs=1e-12)
        assert precision_at_k(pred, truth, "member") == pytest.approx(oracle_precision(pred, truth, True), abs=1e-12)
        assert precision_plus_at_k(pred, truth) == pytest.approx(oracle_precision_plus(pred, truth), abs=1e-12)
        assert recall_at_k(pred, truth, 5) == pytest.approx(oracle_recall(pred, truth, 5), abs=1e-12)

    def test_dominance(self):
        for seed in range(20):
            pred, truth = random_pairs(seed, n=200, n_items=12)
            plus = precision_plus_at_k(pred, truth)
            assert plus >= precision_at_k(pred, truth)
            assert plus >= precision_at_k(pred, truth, "member")
            assert plus >= recall_at_k(pred, truth, 5)

    def test_order_beyond_first_irrelevant(self):
        pred, truth = random_pairs(4, n=100)
        shuffled = [[p[0]] + p[1:][::-1] for p in pred]
        assert precision_at_k(pred, truth) == precision_at_k(shuffled, truth)
        assert recall_at_k(pred, truth, 5) == recall_at_k(shuffled, truth, 5)

    def test_errors(self):
        with pytest.raises(ContractError):
            recall_at_k([[1]], [], 1)
        with pytest.raises(ContractError):
            precision_plus_at_k([[]], [[1]])
        with pytest.raises(ContractError):
            precision_at_k([[1]], [[1]], "nearest")


def _inst(cands, bundle, user=0):
    return GenerationInstance(user, tuple(cands), tuple(bundle))


class TestBaselines:
    def test_pop_uniform_ties(self):
        train = [_inst([0, 1, 2, 3], [0, 1]), _inst([2, 3, 0, 1], [2, 3])]
        pop = PopularityBaseline().fit(train, n_items=10)
        assert pop.predict([_inst([9, 7, 3, 1, 5], [9, 7])]) == [[1, 3]]

    def test_pop_dominant(self):
        train = [_inst([4, 1, 2], [4, 1]), _inst([4, 2, 3], [4, 2]), _inst([4, 3, 1], [4, 3])]
        pop = PopularityBaseline().fit(train, n_items=8)
        for cands in ([7, 6, 4], [4, 0, 5], [5, 6, 4]):
            assert pop.predict([_inst(cands, cands[:2])], k=1)[0] == [4]

    def test_bpr_orthonormal(self):
        items = np.eye(4)
        users = items[[2]]
        model = BPRBaseline(PreferenceEmbeddings(users, items)).fit()
        assert model.predict([_inst([0, 1, 2, 3], [0, 1])], k=1) == [[2]]

    def test_bpr_ties(self):
        model = BPRBaseline(PreferenceEmbeddings(np.ones((1, 2)), np.ones((6, 2)))).fit()
        assert model.predict([_inst([5, 3, 4, 0], [5, 3])]) == [[0, 3]]

    def test_bpr_sort_oracle(self):
        rng = np.random.default_rng(0)
        emb = PreferenceEmbeddings(rng.normal(size=(3, 4)), rng.normal(size=(20, 4)))
        model = BPRBaseline(emb).fit()
        for _ in range(50):
            cands = rng.choice(20, 8, replace=False).tolist()
            user = int(rng.integers(3))
            scores = {c: float(emb.user_table[user] @ emb.item_table[c]) for c in cands}
            oracle = sorted(cands, key=lambda c: (-scores[c], c))[:3]
            assert model.predict([_inst(cands, cands[:3], user)]) == [oracle]

    def test_bpr_requires_embeddings(self):
        with pytest.raises(ContractError):
            BPRBaseline().fit()


class TestLatency:
    def test_pass_counts(self):
        pref, graph, inst = _toy(n_items=30, m=25)
        model = _model().fit(inst, preference=pref, graph=graph)
        table = latency_account(model, inst[:3], [1, 5, 20])
        assert [row["nat_passes_per_bundle"] for row in table] == [1, 1, 1]
        assert [row["ar_passes_per_bundle"] for row in table] == [1, 5, 20]
        assert [row["ratio"] for row in table] == [1, 5, 20]

    def test_order_independent(self):
        pref, graph, inst = _toy(n_items=30, m=25)
        model = _model().fit(inst, preference=pref, graph=graph)
        flipped = [GenerationInstance(i.user, i.candidates[::-1], i.bundle) for i in inst[:3]]
        assert latency_account(model, inst[:3], [5]) == latency_account(model, flipped, [5])


class TestReport:
    def test_round_trip(self, tmp_path):
        pred, truth = random_pairs(5, n=20)
        insts = [_inst(t + [p for p in range(30, 35)], t) for t in truth]
        methods = [method_result(name, pred, insts) for name in ("POP", "BPR", "BundleNAT")]
        report = EvalReport(methods, {"n_test": 20, "sha256": "abc"}, config={"seed": 0})
        emit_report(report, tmp_path / "report.json")
        back = read_report(tmp_path / "report.json")
        assert back == report
        assert back.fingerprint["n_test"] == 20
        lines = back.table().splitlines()
        assert len(lines) == 5 and "Recall@5" in lines[0]
        assert [line.split()[0] for line in lines[2:]] == ["POP", "BPR", "BundleNAT"]

    def test_field_names(self, tmp_path):
        pred, truth = random_pairs(6, n=5)
        insts = [_inst(t + [30], t) for t in truth]
        emit_report(EvalReport([method_result("POP", pred, insts)], {}), tmp_path / "r.json")
        import json

        fields = json.loads((tmp_path / "r.json").read_text())["methods"][0]
        assert list(fields) == ["method", "precision", "precision_plus", "recall", "k", "m", "n_instances", "passes_per_bundle"]
