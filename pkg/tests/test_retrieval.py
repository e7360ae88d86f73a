import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finq.enrich import Gazetteer, LocalEmbeddingProvider, ProviderUnavailable, enrich_object
from finq.errors import FinqError
from finq.index.store import IndexParams, KnowledgeIndex
from finq.models import Category, EntityType, KnowledgeObject
from finq.retrieval import (
    Candidate,
    EmbeddingFailed,
    EmptyQuery,
    FusionMethod,
    Fused,
    InvalidParameter,
    Query,
    QueryTooLong,
    Retriever,
    SearchMode,
    execute_query,
    fuse_rrf,
    fuse_weighted,
    keyword_search,
    min_max,
    over_fetch,
    rerank,
    resolve_mode,
    semantic_search,
    validate_query,
    without_timings,
)

PROVIDER = LocalEmbeddingProvider()
GAZ = Gazetteer({"nvidia": EntityType.ORGANIZATION, "goldman sachs": EntityType.ORGANIZATION})


def build_index(bodies):
    index = KnowledgeIndex(IndexParams(M=8, ef_construction=64))
    for oid, body in bodies.items():
        obj = KnowledgeObject(oid, oid, body, Category.DOCUMENT)
        index.upsert(enrich_object(obj, PROVIDER, GAZ, chunk_size=64, overlap=8))
    return index


# -- validation and mode ------------------------------------------------------


def test_validate_trims_and_defaults():
    assert validate_query("  financial risk  ") == Query(text="financial risk", mode=SearchMode.AUTO, k=10)


@pytest.mark.parametrize(
    "raw, exc, field",
    [
        ("", EmptyQuery, None),
        ("   ", EmptyQuery, None),
        ("?!", EmptyQuery, None),
        ("x" * 1025, QueryTooLong, None),
        ({"text": "risk", "alpha": 1.5}, InvalidParameter, "alpha"),
        ({"text": "risk", "k": 0}, InvalidParameter, "k"),
        ({"text": "risk", "k": 101}, InvalidParameter, "k"),
        ({"text": "risk", "k": True}, InvalidParameter, "k"),
        ({"text": "risk", "mode": "fuzzy"}, InvalidParameter, "mode"),
        ({"text": "risk", "fusion": "max"}, InvalidParameter, "fusion"),
        ({"text": "risk", "rerank": "yes"}, InvalidParameter, "rerank"),
        ({"text": "risk", "colour": 1}, InvalidParameter, "colour"),
        ({"text": 5}, InvalidParameter, "text"),
    ],
)
def test_validation_errors(raw, exc, field):
    with pytest.raises(exc) as info:
        validate_query(raw)
    if field:
        assert info.value.field == field
    assert info.value.stage == "validate"


def test_query_length_limit_is_bytes():
    validate_query("é" * 512)
    with pytest.raises(QueryTooLong):
        validate_query("é" * 513)


@pytest.mark.parametrize(
    "text, mode",
    [
        ("Financial services risk management", SearchMode.SEMANTIC),
        ("Uh, so like, how do financial services, you know, manage risks and all that?", SearchMode.HYBRID),
        ("risk", SearchMode.KEYWORD),
        ("the risk of a bank", SearchMode.KEYWORD),
        ("liquidity coverage ratio rules for regional lenders in europe today", SearchMode.HYBRID),
    ],
)
def test_resolve_mode(text, mode):
    assert resolve_mode(validate_query(text)) is mode


def test_explicit_mode_passes_through():
    q = validate_query({"text": "how do banks manage credit risk in practice", "mode": "keyword"})
    assert resolve_mode(q) is SearchMode.KEYWORD


# -- channels -------------------------------------------------------------------


def test_keyword_channel_ranking_and_limits():
    index = build_index(
        {
            "s/all": "our financial risk management framework",
            "s/one": "financial statements audited",
            "s/two": "risk appetite memo",
            "s/none": "dividend policy",
        }
    )
    hits = keyword_search("financial risk management", index.bm25, over_fetch(10))
    assert hits[0].doc_id == "s/all"
    assert {h.doc_id for h in hits} == {"s/all", "s/one", "s/two"}
    assert over_fetch(10) == 50 and over_fetch(40) == 120
    assert keyword_search("the and of", index.bm25, 50) == []


def test_semantic_channel():
    bodies = {
        "s/a": "credit default swaps hedge counterparty exposure",
        "s/b": "quarterly dividend yield",
        "s/c": "mortgage rates and housing",
    }
    index = build_index(bodies)
    assert semantic_search("credit default swaps hedge counterparty exposure", PROVIDER, index.hnsw, 50)[0].doc_id == "s/a"
    hits = {c.doc_id: c.score for c in semantic_search("dividend yield outlook", PROVIDER, index.hnsw, 50)}
    assert hits["s/b"] > hits.get("s/a", -1.0) and hits["s/b"] > hits.get("s/c", -1.0)
    assert semantic_search("anything", PROVIDER, KnowledgeIndex().hnsw, 50) == []


def test_semantic_collapses_chunks_to_documents():
    body = " ".join(f"w{i}" for i in range(300))
    index = build_index({"s/long": body, "s/short": "w1 w2 w3"})
    hits = semantic_search("w1 w2 w3", PROVIDER, index.hnsw, 50)
    assert [h.doc_id for h in hits].count("s/long") == 1
    assert all(h.chunk_id.startswith(h.doc_id + "#") for h in hits)


# -- fusion ---------------------------------------------------------------------


def test_weighted_tie_broken_by_id():
    kw = [("d2", 0.0), ("d1", 1.0)]
    sem = [("d1", 0.0), ("d2", 1.0)]
    fused = fuse_weighted(kw, sem, 0.5, 10)
    assert [(f.doc_id, f.fused) for f in fused] == [("d1", 0.5), ("d2", 0.5)]


def test_weighted_boundaries_simple():
    kw = [("a", 3.0), ("b", 2.0), ("c", 1.0)]
    sem = [("c", 0.9), ("d", 0.5), ("a", 0.1)]
    assert [f.doc_id for f in fuse_weighted(kw, sem, 1.0, 10)][:3] == ["a", "b", "c"]
    assert [f.doc_id for f in fuse_weighted(kw, sem, 0.0, 10)][:3] == ["c", "d", "a"]


def test_min_max_constant_channel():
    assert min_max({"a": 2.0, "b": 2.0}) == {"a": 1.0, "b": 1.0}
    assert min_max({}) == {}


def test_rrf_values():
    (top,) = fuse_rrf([("d", 5.0)], [("d", 0.9)], 10)
    assert top.fused == pytest.approx(2 / 61, abs=1e-12)
    fused = fuse_rrf([("solo", 9.0), ("both", 5.0)], [("x", 0.9), ("both", 0.8)], 10)
    scores = {f.doc_id: f.fused for f in fused}
    assert scores["solo"] == pytest.approx(1 / 61, abs=1e-12)
    assert scores["both"] == pytest.approx(2 / 62, abs=1e-12)
    assert fused[0].doc_id == "both"
    assert fuse_rrf([], [], 10) == [] and fuse_weighted([], [], 0.5, 10) == []


_channel = st.dictionaries(st.sampled_from("abcdefghij"), st.floats(0, 10, allow_nan=False), max_size=8)


@settings(max_examples=100, deadline=None)
@given(_channel, _channel, st.floats(0, 1), st.sampled_from("abcdefghij"), st.floats(0.01, 5))
def test_weighted_monotone_and_in_range(kw, sem, alpha, target, bump):
    kw_c = list(kw.items())
    sem_c = list(sem.items())
    fused = fuse_weighted(kw_c, sem_c, alpha, 100)
    assert all(0.0 <= f.fused <= 1.0 + 1e-12 for f in fused)
    assert all(0.0 <= f.keyword_norm <= 1.0 and 0.0 <= f.semantic_norm <= 1.0 for f in fused)
    if target not in kw or not fused:
        return
    before = [f.doc_id for f in fused].index(target)
    # raising the target's keyword score, others fixed, never lowers its rank
    bumped = dict(kw)
    bumped[target] = max(kw.values()) + bump if kw[target] < max(kw.values()) else kw[target]
    after = [f.doc_id for f in fuse_weighted(list(bumped.items()), sem_c, alpha, 100)].index(target)
    assert after <= before


# -- rerank ---------------------------------------------------------------------


def test_rerank_preserves_exact_order_without_signal():
    index = build_index(
        {
            "s/a": "liquidity stress test results",
            "s/b": "liquidity reserves",
            "s/c": "stress",
        }
    )
    qv = PROVIDER.embed("liquidity stress test results")
    exact = sorted(index.docs, key=lambda d: -index.best_chunk(d, qv)[1])
    cands = [Fused(d, fused=0.3) for d in exact]
    out = rerank(cands, qv, index, 10, query_text="liquidity stress test results")
    assert [f.doc_id for f in out] == exact


def test_rerank_entity_boost_breaks_tie():
    index = build_index({"s/with": "Nvidia earnings beat", "s/without": "Vendor earnings beat"})
    qv = PROVIDER.embed("earnings beat")
    assert index.best_chunk("s/with", qv)[1] == pytest.approx(index.best_chunk("s/without", qv)[1])
    cands = [Fused("s/with", fused=0.4), Fused("s/without", fused=0.4)]
    plain = {f.doc_id: f.fused for f in rerank(cands, qv, index, 10, query_text="earnings beat")}
    boosted = {f.doc_id: f.fused for f in rerank(cands, qv, index, 10, query_text="nvidia earnings beat")}
    assert plain["s/with"] == plain["s/without"]
    assert boosted["s/with"] > boosted["s/without"]
    assert boosted["s/with"] - plain["s/with"] == pytest.approx(0.05)


def test_rerank_boost_capped():
    gaz = Gazetteer({w: EntityType.ORGANIZATION for w in ("alpha", "beta", "gamma", "delta", "omega")})
    index = KnowledgeIndex(IndexParams(M=8))
    obj = KnowledgeObject("s/x", "x", "alpha beta gamma delta omega", Category.DOCUMENT)
    index.upsert(enrich_object(obj, PROVIDER, gaz))
    qv = PROVIDER.embed("alpha beta gamma delta omega")
    (out,) = rerank([Fused("s/x", fused=1.0)], qv, index, 5, query_text="alpha beta gamma delta omega")
    assert out.fused == pytest.approx(0.5 + 0.5 + 0.15)


def test_rerank_truncates_and_skips_unknown():
    index = build_index({f"s/{i}": f"bond yield {i}" for i in range(6)})
    qv = PROVIDER.embed("bond yield")
    notices = []
    cands = [Fused(f"s/{i}", fused=i / 10) for i in range(6)] + [Fused("s/ghost", fused=1.0)]
    out = rerank(cands, qv, index, 3, warnings=notices)
    assert len(out) == 3
    assert {f.doc_id for f in out} <= {c.doc_id for c in cands} - {"s/ghost"}
    assert notices == [{"code": "UnknownCandidate", "object_id": "s/ghost"}]


# -- execute --------------------------------------------------------------------


def three_doc_retriever():
    index = build_index(
        {
            "s/risk": "How banks manage credit risk with limits. Nvidia is not involved.",
            "s/div": "Dividend policy and payout ratios",
            "s/gs": "Goldman Sachs trading revenue",
        }
    )
    return Retriever(index, PROVIDER)


def test_hybrid_payload_structure():
    payload = execute_query({"text": "how do banks manage credit risk", "mode": "hybrid"}, three_doc_retriever())
    assert payload["resolved_mode"] == "hybrid"
    assert set(payload["timings_ms"]) == {"validate", "embed", "search", "fuse", "rerank"}
    assert all(v >= 0 for v in payload["timings_ms"].values())
    assert payload["results"][0]["object_id"] == "s/risk"
    assert [r["rank"] for r in payload["results"]] == list(range(1, len(payload["results"]) + 1))
    expected = {}
    for res in payload["results"]:
        for e in res["entities"]:
            expected.setdefault(e["entity_type"], set()).add(e["surface"])
    assert payload["entities"] == {t: sorted(s) for t, s in sorted(expected.items())}
    assert "Nvidia" in payload["entities"]["ORGANIZATION"]
    json.dumps(payload)


def test_keyword_miss_is_empty_not_error():
    payload = execute_query({"text": "zeppelin", "mode": "keyword"}, three_doc_retriever())
    assert payload["results"] == [] and payload["entities"] == {}


def test_all_modes_and_fusions_score_ranges():
    r = three_doc_retriever()
    for mode in ("keyword", "semantic", "hybrid"):
        for fusion in ("weighted", "rrf"):
            for rr in (True, False):
                p = r.execute({"text": "credit risk dividend", "mode": mode, "fusion": fusion, "rerank": rr, "k": 2})
                assert len(p["results"]) <= 2
                for res in p["results"]:
                    assert -1.0 <= res["semantic_score"] <= 1.0
                    assert res["keyword_score"] >= 0
                    assert 0.0 <= res["fused_score"] <= (1.15 if rr else 1.0) + 1e-9
                scores = [res["fused_score"] for res in p["results"]]
                assert scores == sorted(scores, reverse=True)


def test_execute_is_deterministic():
    a = without_timings(three_doc_retriever().execute("how do banks manage credit risk"))
    b = without_timings(three_doc_retriever().execute("how do banks manage credit risk"))
    assert json.dumps(a) == json.dumps(b)


class DownProvider(LocalEmbeddingProvider):
    def embed(self, text):
        raise ProviderUnavailable("provider offline")


def test_embedding_failure_is_stage_attributed():
    r = three_doc_retriever()
    r.provider = DownProvider()
    with pytest.raises(EmbeddingFailed) as info:
        r.execute({"text": "credit risk models today", "mode": "semantic"})
    assert info.value.to_payload()["error"]["stage"] == "embed"
    # keyword mode without rerank never embeds
    assert r.execute({"text": "credit", "mode": "keyword", "rerank": False})["results"]
