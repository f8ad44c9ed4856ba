import dataclasses
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import (
    DESK_SCALE,
    build_lambda_ladder_world,
    build_world,
    fact_docs,
    fact_queries,
)
from bknn.errors import DataFormatError
from bknn.evaluation import (
    Dataset,
    EvalReport,
    FactTriple,
    GridPoint,
    GridSpec,
    check_disjoint,
    evaluate,
    evaluate_cell,
    grid_search,
    instantiate,
    load_dataset,
    mean_precision,
    precision_at,
)
from bknn.knn import KnnConfig
from bknn.pipeline import ImportedLm, InterpolationConfig, StubLm, parse_cloze_text


class TestInstantiate:

    def test_subject_and_mask_substitution(self):
        fact = FactTriple(subject="hans gefors", relation="place_of_birth",
                          obj="Stockholm", template="X was born in Y")
        q = instantiate(fact)
        assert q.tokens == ("hans", "gefors", "was", "born", "in", "[MASK]")
        assert q.gold_answer == "stockholm"
        assert q.subject == "hans gefors"

    def test_multi_token_object_rejected(self):
        fact = FactTriple(subject="s", relation="r", obj="new york",
                          template="X lives in Y")
        with pytest.raises(DataFormatError, match="single token"):
            instantiate(fact)

    def test_mask_before_subject(self):
        fact = FactTriple(subject="james joyce", relation="author",
                          obj="ulysses", template="Y by X")
        q = instantiate(fact)
        assert q.tokens == ("[MASK]", "by", "james", "joyce")

    def test_template_missing_placeholder(self):
        with pytest.raises(DataFormatError, match="template"):
            FactTriple(subject="s", relation="r", obj="o", template="X only")
        with pytest.raises(DataFormatError, match="template"):
            FactTriple(subject="s", relation="r", obj="o", template="Y and Y of X")

    def test_placeholder_not_inside_words(self):
        fact = FactTriple(subject="s", relation="r", obj="o",
                          template="Xylophone X sounds like Y")
        q = instantiate(fact)
        assert q.tokens[0] == "xylophone"


class TestMetrics:

    def test_precision_at_examples(self):
        assert precision_at([1, 2, 3], 2, 1) == 0
        assert precision_at([1, 2, 3], 2, 5) == 1
        assert precision_at([1, 2, 3], 9, 10) == 0

    def test_precision_at_validation(self):
        with pytest.raises(ValueError):
            precision_at([1], 1, 0)

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True),
           st.integers(0, 30))
    def test_precision_monotone_in_r(self, ranking, gold):
        values = [precision_at(ranking, gold, r) for r in range(1, 25)]
        assert values == sorted(values)

    def test_two_stage_mean(self):
        assert mean_precision({"A": [1, 0], "B": [1, 1]}) == pytest.approx(0.75)

    def test_single_relation_plain_mean(self):
        assert mean_precision({"A": [1, 0, 0, 1]}) == pytest.approx(0.5)

    def test_distinguishes_flat_average(self):
        hits = {"A": [0], "B": [1, 1, 1]}
        flat = sum(sum(v) for v in hits.values()) / 4
        assert flat == pytest.approx(0.75)
        assert mean_precision(hits) == pytest.approx(0.5)

    def test_order_invariance(self):
        a = mean_precision({"A": [1, 0, 1], "B": [0, 0]})
        b = mean_precision({"B": [0, 0], "A": [1, 1, 0]})
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_precision({})


class TestLoadDataset:

    def test_triple_rows(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"relation": "r", "subject": "a b",
                                 "object": "c", "template": "X is Y"}) + "\n")
        ds = load_dataset(p)
        assert len(ds.queries) == 1 and ds.queries[0].query_id == "q000001"

    def test_pre_instantiated_rows(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"query_id": "x1", "masked_text": "a [MASK] c",
                                 "answer": "b", "relation": "r"}) + "\n")
        ds = load_dataset(p)
        assert ds.queries[0].gold_answer == "b"

    def test_multi_token_answers_rejected_and_counted(self, tmp_path):
        rows = [
            {"relation": "r", "subject": "s", "object": "two words", "template": "X is Y"},
            {"relation": "r", "subject": "s2", "object": "single", "template": "X is Y"},
            {"query_id": "k", "masked_text": "a [MASK]", "answer": "two words",
             "relation": "r"},
        ]
        p = tmp_path / "d.jsonl"
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        ds = load_dataset(p)
        assert len(ds.queries) == 1 and ds.rejected == 2

    def test_unknown_row_shape(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"foo": 1}\n')
        with pytest.raises(DataFormatError):
            load_dataset(p)

    def test_check_disjoint(self):
        a = [parse_cloze_text("x [MASK]", query_id="q1")]
        b = [parse_cloze_text("y [MASK]", query_id="q1")]
        with pytest.raises(DataFormatError, match="q1"):
            check_disjoint(a, b)
        check_disjoint(a, [parse_cloze_text("y [MASK]", query_id="q2")])


@pytest.fixture(scope="module")
def fact_world(tmp_path_factory):
    docs, facts = fact_docs(30)
    world = build_world(tmp_path_factory.mktemp("facts") / "w", docs,
                        candidate_surfaces=[o for _, _, o in facts])
    return world, fact_queries(facts)


class TestEvaluate:

    def test_lm_mode_is_pure_lm_ranking(self, fact_world):
        world, queries = fact_world
        lm = StubLm.from_corpus(world.corpus, world.candidates)
        arts = world.artifacts(lm=lm)
        report = evaluate(queries[:10], arts, mode="lm")
        from bknn.pipeline import rank
        hits = []
        for q in queries[:10]:
            ranking = [t for t, _ in rank(lm.predict(q, world.candidates))]
            hits.append(1 if ranking[0] == world.candidates.id_of(q.gold_answer) else 0)
        by_rel = {}
        for q, h in zip(queries[:10], hits):
            by_rel.setdefault(q.relation, []).append(h)
        assert report.means[1] == pytest.approx(mean_precision(by_rel))

    def test_endpoint_equalities_exact(self, fact_world):
        world, queries = fact_world
        lm = StubLm.from_corpus(world.corpus, world.candidates)
        lam0 = world.artifacts(lm=lm, interp=InterpolationConfig(lam=0.0))
        assert evaluate(queries, lam0, mode="interpolated").results() == \
               evaluate(queries, lam0, mode="lm").results()
        lam1 = world.artifacts(lm=lm, interp=InterpolationConfig(lam=1.0))
        assert evaluate(queries, lam1, mode="interpolated").results() == \
               evaluate(queries, lam1, mode="knn").results()

    def test_p_at_r_nested(self, fact_world):
        world, queries = fact_world
        report = evaluate(queries, world.artifacts(), mode="interpolated")
        assert report.means[1] <= report.means[5] <= report.means[10]
        for rel in report.relations.values():
            assert rel.p_at[1] <= rel.p_at[5] <= rel.p_at[10]

    def test_oov_gold_excluded_and_counted(self, fact_world):
        world, queries = fact_world
        bad = parse_cloze_text("person0 name0 was born in [MASK].",
                               subject="person0 name0", gold_answer="neverseen",
                               query_id="bad1", relation="born_in")
        report = evaluate(list(queries[:5]) + [bad], world.artifacts(),
                          mode="interpolated")
        assert report.excluded == 1
        assert report.query_count == 5

    def test_per_query_errors_recorded_not_fatal(self, fact_world, tmp_path):
        world, queries = fact_world
        lm_path = tmp_path / "lm.jsonl"
        gold0 = queries[0].gold_answer
        lm_path.write_text(json.dumps(
            {"query_id": queries[0].query_id,
             "probs": [[gold0, 1.0]]}) + "\n")
        arts = world.artifacts(lm=ImportedLm.load(lm_path))
        report = evaluate(queries[:3], arts, mode="lm")
        assert report.query_count == 1
        assert len(report.errors) == 2
        assert "missing" in report.errors[0]

    def test_thread_count_invariance(self, fact_world):
        world, queries = fact_world
        arts = world.artifacts()
        one = evaluate(queries, arts, mode="interpolated", threads=1)
        four = evaluate(queries, arts, mode="interpolated", threads=4)
        assert one == four

    def test_all_excluded_raises(self, fact_world):
        world, _ = fact_world
        bad = parse_cloze_text("x [MASK]", gold_answer=None, query_id="b")
        with pytest.raises(DataFormatError, match="excluded"):
            evaluate([bad], world.artifacts(), mode="lm")

    def test_report_table(self, fact_world):
        world, queries = fact_world
        report = evaluate(queries[:6], world.artifacts(), mode="knn")
        table = report.format_table()
        assert "P@1" in table and "mean" in table


class TestGridSearch:

    def test_grid_of_size_one(self, fact_world):
        world, queries = fact_world
        spec = GridSpec(n_values=(2,), lambdas=(0.4,), k_values=(16,), l_values=(7.0,))
        result = grid_search(queries[:8], world.artifacts(), spec)
        assert result.best == GridPoint(2, 0.4, 16, 7.0)

    def test_default_grid_cardinality(self):
        assert GridSpec().size == 840  # 5 * 7 * 3 * 8

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            GridSpec(n_values=())

    def test_staged_equals_naive_recomputation(self, fact_world):
        world, queries = fact_world
        spec = GridSpec(n_values=(1, 3), lambdas=(0.2, 0.5), k_values=(8, 32),
                        l_values=(5.0, 9.0))
        result = grid_search(queries[:12], world.artifacts(), spec)
        cells = {(c["n"], c["lambda"], c["k"], c["l"]): c["p_at_1"]
                 for c in result.cells}
        for point in (GridPoint(1, 0.2, 8, 5.0), GridPoint(3, 0.5, 32, 9.0),
                      GridPoint(1, 0.5, 8, 9.0)):
            naive = evaluate_cell(queries[:12], world.artifacts(), point)
            assert cells[(point.n, point.lam, point.k, point.l)] == \
                   pytest.approx(naive, abs=1e-12)

    def test_lambda_ladder_optimum(self, tmp_path):
        # thresholds sit between successive lambda grid points, so P@1
        # strictly increases along the grid and the maximum (0.8) wins; the
        # other axes tie and resolve by the declared preference for small
        # N / small k / small l
        specs = [(6, 0.165), (6, 0.27), (6, 0.415), (6, 0.625), (6, 0.95),
                 (5, 0.775)]
        ladder = build_lambda_ladder_world(tmp_path / "ladder", zeros=16,
                                           period=8, specs=specs)
        spec = GridSpec(k_values=(8, 16), l_values=(5.0, 9.0))
        arts = ladder.world.artifacts(lm=ImportedLm.load(ladder.lm_path),
                                      knn_config=KnnConfig(k=16, scale=5.0))
        result = grid_search(ladder.queries, arts, spec)
        assert result.best == GridPoint(1, 0.8, 8, 5.0)
        for cell in result.cells:
            expected = ladder.expected_p_at_1(cell["lambda"])
            assert cell["p_at_1"] == pytest.approx(expected, abs=1e-12), cell

    def test_rerun_identical(self, fact_world):
        world, queries = fact_world
        spec = GridSpec(n_values=(1, 2), lambdas=(0.3, 0.6), k_values=(8,),
                        l_values=(5.0,))
        a = grid_search(queries[:10], world.artifacts(), spec)
        b = grid_search(queries[:10], world.artifacts(), spec)
        assert a == b

    def test_excluded_counted(self, fact_world):
        world, queries = fact_world
        bad = parse_cloze_text("x [MASK]", gold_answer="neverseen", query_id="bad")
        spec = GridSpec(n_values=(1,), lambdas=(0.3,), k_values=(8,), l_values=(5.0,))
        result = grid_search(list(queries[:4]) + [bad], world.artifacts(), spec)
        assert result.excluded == 1 and result.query_count == 4
