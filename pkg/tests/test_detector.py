import random

import pytest

from halloffame import (
    ColumnRef,
    Delta,
    Engine,
    GeneratorConfig,
    UpdateRecord,
    build_column_index,
    build_selection_queries,
    column_filter,
    detect,
    diff_rankings,
    generate_queries,
    load_catalog,
)
from halloffame.store import RankingState
from conftest import load_instance
from oracles import make_instance, make_updates, oracle_eval_query, oracle_run


def fig5_update(seq=1):
    return UpdateRecord(seq, "update", "stockmarket", {"s_value": Delta(10)}, {"s_companyid": 8})


@pytest.fixture
def bloomberg_engine(bloomberg):
    catalog, store = bloomberg
    queries = generate_queries(catalog, GeneratorConfig(k=3, c_num=1, j_num=3), store)
    return catalog, store, Engine(catalog, store, queries)


class TestColumnIndex:
    def test_queries_indexed_under_their_columns(self):
        rng = random.Random(6)
        inst = make_instance(rng, n_rows=60)
        catalog, store = load_instance(inst)
        queries = generate_queries(catalog, GeneratorConfig(k=3, c_num=1, j_num=0), store)
        index = build_column_index(queries)
        for q in queries:
            for col in q.referenced_columns:
                assert q.id in index[col]
        # inverse direction: the index holds nothing beyond referenced_columns
        for col, ids in index.items():
            for qid in ids:
                q = next(x for x in queries if x.id == qid)
                assert col in q.referenced_columns

    def test_empty_query_set(self):
        assert build_column_index([]) == {}

    def test_criterion_column_always_present(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        index = engine.column_index
        s_value = ColumnRef("stockmarket", "s_value")
        assert index[s_value] == set(engine.queries)


class TestSelectionQueries:
    def test_single_table_schema_has_empty_cover(self):
        catalog = load_catalog(
            """
relations:
  - name: only
    columns: [{name: x, type: integer}]
"""
        )
        covers = build_selection_queries(catalog)
        assert len(covers["only"]) == 1
        assert covers["only"][0].join_cover == ()

    def test_stockmarket_cover_reaches_all_relations(self, bloomberg):
        catalog, _ = bloomberg
        covers = build_selection_queries(catalog)["stockmarket"]
        assert covers
        for cover in covers:
            reached = {"stockmarket"}
            for edge in cover.join_cover:
                reached |= edge.relations()
            assert reached == {"stockmarket", "company", "country", "shareholder", "person"}

    def test_parallel_edges_give_two_covers(self):
        catalog = load_catalog(
            """
relations:
  - name: orders
    columns:
      - {name: o_id, type: integer}
      - {name: ship_addr, type: integer}
      - {name: bill_addr, type: integer}
    key: [o_id]
  - name: address
    columns: [{name: a_id, type: integer}, {name: city, type: text}]
    key: [a_id]
join_edges:
  - {from: orders.ship_addr, to: address.a_id}
  - {from: orders.bill_addr, to: address.a_id}
"""
        )
        covers = build_selection_queries(catalog)["orders"]
        assert len(covers) == 2
        assert {len(c.join_cover) for c in covers} == {1}

    def test_every_query_path_embeds_in_some_cover(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        for q in engine.queries.values():
            for relation in q.relations():
                plan = engine._plans[(q.id, relation)]
                assert set(q.join_path) <= set(plan.cover.join_cover)


class TestColumnFilter:
    def test_unreferenced_column_filtered(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        u = UpdateRecord(1, "update", "shareholder", {"s_amount": 99}, {"s_personid": 0, "s_companyid": 3})
        assert column_filter(u, engine.column_index) == set()

    def test_criterion_column_matches_all_its_queries(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        assert column_filter(fig5_update(), engine.column_index) == set(engine.queries)

    def test_insert_counts_all_columns(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        u = UpdateRecord(1, "insert", "stockmarket", {"s_companyid": 9, "s_value": 5}, {})
        assert column_filter(u, engine.column_index) == set(engine.queries)


class TestRowFilter:
    def test_unmatched_binding_filtered_out(self, bloomberg_engine):
        _, store, engine = bloomberg_engine
        usa = next(
            qid
            for qid, q in engine.queries.items()
            if any(a.kind == "binding" and a.right == "USA" for a in q.predicate)
            and str(q.entity_attr) == "company.c_name"
        )
        u = fig5_update()
        rows = store.match_rows(u)
        assert rows == [8]
        survivors = engine.row_filter(u, rows, {usa})
        assert survivors == set()  # company 8 is Greek, not in the USA group

    def test_matching_row_retained(self, bloomberg):
        # k=2 so the Greece-bound ranking (two Greek companies) exists
        catalog, store = bloomberg
        queries = generate_queries(catalog, GeneratorConfig(k=2, c_num=1, j_num=3), store)
        engine = Engine(catalog, store, queries)
        greece = next(
            qid
            for qid, q in engine.queries.items()
            if any(a.kind == "binding" and a.right == "Greece" for a in q.predicate)
        )
        u = fig5_update()
        survivors = engine.row_filter(u, store.match_rows(u), {greece})
        assert survivors == {greece}

    def test_empty_affected_rows(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        assert engine.row_filter(fig5_update(), [], set(engine.queries)) == set()


class TestDiffRankings:
    def test_identical_states(self):
        state = RankingState((("a", 3), ("b", 2)))
        assert diff_rankings(state, state, 5) == []

    def test_entering_from_outside(self):
        old = RankingState((("a", 9), ("b", 8)))
        new = RankingState((("a", 9), ("c", 8)))
        assert diff_rankings(old, new, 2) == [("c", 3, 2)]

    def test_fig5_before_after(self):
        old = RankingState((("Bill Gates", 210), ("Warren E. Buffet", 210), ("Amancio O. Gaona", 204)))
        new = RankingState((("Amancio O. Gaona", 214), ("Bill Gates", 210), ("Warren E. Buffet", 210)))
        assert diff_rankings(old, new, 3) == [("Amancio O. Gaona", 3, 1)]


class TestDetect:
    def test_fig5_produces_exactly_one_event(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        events = detect(fig5_update(), engine)
        improvements = [(e.entity, e.from_rank, e.to_rank) for e in events]
        assert ("Amancio O. Gaona", 3, 1) in improvements
        person_events = [
            e for e in events if str(engine.queries[e.query_id].entity_attr) == "person.p_name"
        ]
        assert [(e.entity, e.from_rank, e.to_rank) for e in person_events] == [
            ("Amancio O. Gaona", 3, 1)
        ]
        assert all(e.from_rank > e.to_rank for e in events)

    def test_no_match_update_skips_reevaluation(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        u = UpdateRecord(1, "update", "stockmarket", {"s_value": 5}, {"s_companyid": 999})
        assert detect(u, engine) == []
        assert engine.last_stats.row_candidates == 0

    def test_unreferenced_column_skips_row_filter(self, bloomberg_engine):
        _, _, engine = bloomberg_engine
        u = UpdateRecord(
            1, "update", "shareholder", {"s_amount": 1}, {"s_personid": 0, "s_companyid": 3}
        )
        assert detect(u, engine) == []
        assert engine.last_stats.column_candidates == 0

    def test_determinism(self, bloomberg):
        def one_run():
            catalog, store = load_catalog_and_store()
            queries = generate_queries(catalog, GeneratorConfig(k=3, c_num=1, j_num=3), store)
            engine = Engine(catalog, store, queries)
            out = []
            for seq in range(1, 4):
                out.append(detect(fig5_update(seq), engine))
            return out

        def load_catalog_and_store():
            from conftest import load_dataset

            return load_dataset("bloomberg")

        assert one_run() == one_run()

    def test_invalid_update_leaves_store_untouched(self, bloomberg_engine):
        _, store, engine = bloomberg_engine
        before = [list(r) for r in store.table("stockmarket").rows]
        bad = UpdateRecord(1, "update", "stockmarket", {"s_value": "oops"}, {"s_companyid": 8})
        with pytest.raises(Exception):
            detect(bad, engine)
        assert store.table("stockmarket").rows == before


class TestSoundness:
    """Engine events must equal re-evaluating every query on every update."""

    def run_instance(self, trial, rng):
        inst = make_instance(
            rng,
            n_rows=rng.randrange(40, 200),
            n_entities=rng.randrange(6, 25),
            n_c1=rng.randrange(2, 6),
            n_c2=rng.randrange(2, 5),
            two_tables=trial % 2 == 1,
            with_user_atom=trial % 3 == 2,
        )
        catalog, store = load_instance(inst)
        cfg = GeneratorConfig(k=rng.randrange(2, 5), c_num=2, j_num=2)
        queries = generate_queries(catalog, cfg, store)
        if not queries:
            return
        engine = Engine(catalog, store, queries)
        updates = make_updates(rng, inst, 60)
        got = []
        for u in updates:
            for e in detect(u, engine):
                got.append((e.seq, e.query_id, e.entity, e.from_rank, e.to_rank))
            # cached states must equal a from-scratch evaluation at all times
            if u.seq % 17 == 0:
                for qid, q in engine.queries.items():
                    assert engine.rankings[qid] == store.evaluate_hof(q)
        want = oracle_run(inst, queries, updates)
        assert got == want, f"trial {trial}"

    def test_random_instances_match_oracle(self):
        rng = random.Random(1234)
        for trial in range(8):
            self.run_instance(trial, rng)

    def test_changed_queries_always_survive_filters(self):
        rng = random.Random(555)
        inst = make_instance(rng, n_rows=120, n_entities=15, two_tables=True)
        catalog, store = load_instance(inst)
        queries = generate_queries(catalog, GeneratorConfig(k=3, c_num=2, j_num=1), store)
        engine = Engine(catalog, store, queries)
        shadow_catalog, shadow_store = load_instance(inst)
        shadow = Engine(shadow_catalog, shadow_store, queries, filters_enabled=False)
        for u in make_updates(rng, inst, 80):
            filtered = detect(u, engine)
            unfiltered = detect(
                UpdateRecord(u.seq, u.kind, u.table, u.set_values, u.where), shadow
            )
            assert filtered == unfiltered
            assert engine.last_stats.row_candidates <= shadow.last_stats.row_candidates
