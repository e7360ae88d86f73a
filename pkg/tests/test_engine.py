import json

import pytest

import corpus
from finq.enrich import GazetteerError, LocalEmbeddingProvider, ProviderUnavailable
from finq.engine import ConfigError, Engine, EngineConfig
from finq.errors import ValidationError
from finq.extract import ChangeStatus
from finq.retrieval import without_timings
from conftest import Reply

FIVE = {name: corpus.DOCS[name] for name in list(corpus.DOCS)[:5]}


def test_two_pass_idempotence(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    first = Engine.from_config_file(cfg).ingest()
    assert first.counts() == {
        "tasks": 5, "fetched": 5, "new": 5, "modified": 0, "unchanged": 0,
        "failed": 0, "chunks": 5, "entities": first.entities, "indexed": 5,
    }
    second = Engine.from_config_file(cfg).ingest()
    assert second.unchanged == 5 and second.indexed == 0 and second.extract.pushed == 0


def test_corrupt_gazetteer_names_line(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    (tmp_path / "gazetteer.tsv").write_text("Nvidia\tORGANIZATION\nJohn Smith PERSON\n")
    with pytest.raises(GazetteerError, match=r"gazetteer\.tsv:2:"):
        Engine.from_config_file(cfg)


def test_config_validation(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    raw = json.loads(cfg.read_text())
    with pytest.raises(ConfigError, match="unknown"):
        EngineConfig.from_dict({**raw, "colour": 1}, tmp_path)
    with pytest.raises(ConfigError, match="gazetteer"):
        EngineConfig.from_dict({**raw, "gazetteer": "nope.tsv"}, tmp_path)
    with pytest.raises(ConfigError, match="chunk_overlap"):
        EngineConfig.from_dict({**raw, "chunk_size": 64, "chunk_overlap": 64}, tmp_path)
    with pytest.raises(ConfigError, match="remote_http"):
        EngineConfig.from_dict({**raw, "provider": {"kind": "remote_http"}}, tmp_path)
    with pytest.raises(ConfigError, match="alpha"):
        EngineConfig.from_dict({**raw, "fusion": {"alpha": 2}}, tmp_path)
    loaded = EngineConfig.load(cfg)
    assert loaded.snapshot == tmp_path / "state" / "index.finq" and loaded.seed == 7


def test_missing_snapshot_resets_metastore(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    Engine.from_config_file(cfg).ingest()
    (tmp_path / "state" / "index.finq").unlink()
    report = Engine.from_config_file(cfg).ingest()
    assert report.new == 5 and report.indexed == 5


class FailOnce(LocalEmbeddingProvider):
    """Fails every call whose text mentions 'dividend' until ``healed``."""

    healed = False

    def embed(self, text):
        if not self.healed and "dividend" in text.lower():
            raise ProviderUnavailable("offline")
        return super().embed(text)


def test_failed_enrichment_is_retried_next_run(tmp_path):
    cfg = corpus.write_corpus(tmp_path, {k: corpus.DOCS[k] for k in ("dividend-policy", "mortgage-rates")})
    provider = FailOnce()
    engine = Engine.from_config_file(cfg, provider=provider, sleep=lambda s: None)
    first = engine.ingest()
    assert first.indexed == 1 and first.failed == 1
    assert first.failures()[0]["object_id"] == "fixtures/dividend-policy.json"
    provider.healed = True
    second = Engine.from_config_file(cfg, provider=provider).ingest()
    assert second.new == 1 and second.unchanged == 1 and second.indexed == 1


def test_ingest_document_paths(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    engine = Engine.from_config_file(cfg)
    engine.ingest()
    doc = {"object_id": "push/1", "title": "Pushed", "body": "Nvidia liquidity memo", "metadata": {"desk": "fx"}}
    probes = ["nvidia", "liquidity memo", "how do firms manage risks"]

    assert engine.ingest_document(doc) is ChangeStatus.NEW
    before = [json.dumps(without_timings(engine.query(p))) for p in probes]
    snapshot_before = engine.index.to_bytes()
    assert engine.ingest_document(doc) is ChangeStatus.UNCHANGED
    assert [json.dumps(without_timings(engine.query(p))) for p in probes] == before
    assert engine.index.to_bytes() == snapshot_before

    assert engine.ingest_document({**doc, "body": "Nvidia solvency memo"}) is ChangeStatus.MODIFIED
    assert engine.health()["indexed_docs"] == 6

    with pytest.raises(ValidationError):
        engine.ingest_document({**doc, "object_id": "push/2", "body": "   "})
    assert engine.metastore.get("push/2") is None
    with pytest.raises(ValidationError):
        engine.ingest_document({"object_id": "x", "title": "t"})
    with pytest.raises(ValidationError):
        engine.ingest_document({**doc, "category": "memo"})

    reloaded = Engine.from_config_file(cfg)
    assert "push/1" in reloaded.index.docs
    assert reloaded.ingest_document({**doc, "body": "Nvidia solvency memo"}) is ChangeStatus.UNCHANGED


def test_health_tracks_docstore(tmp_path):
    cfg = corpus.write_corpus(tmp_path, FIVE)
    engine = Engine.from_config_file(cfg)
    assert engine.health() == {"status": "ok", "indexed_docs": 0, "snapshot_version": 1}
    engine.ingest()
    assert engine.health()["indexed_docs"] == len(engine.index.docs) == 5


def test_remote_provider_config(tmp_path, http_server):
    http_server.routes["/embed"] = lambda rec: Reply(200, {"embedding": [1.0] + [0.0] * 15})
    cfg = corpus.write_corpus(tmp_path, {"dividend-policy": corpus.DOCS["dividend-policy"]})
    raw = json.loads(cfg.read_text())
    raw.update(dims=16, provider={"kind": "remote_http", "endpoint": http_server.url + "/embed", "model_name": "m"})
    cfg.write_text(json.dumps(raw))
    engine = Engine.from_config_file(cfg)
    assert engine.provider.kind == "remote_http"
    assert engine.ingest().indexed == 1
    assert http_server.hits("/embed") == 1
