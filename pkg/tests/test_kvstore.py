import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auditchain.kvstore import KVStore, UnknownDictionary
from auditchain.ledger import Provenance

ops = st.lists(st.tuples(st.sampled_from(["a", "b"]), st.sampled_from(["k1", "k2", "k3"]),
                         st.binary(max_size=6)), max_size=60)


def filled(rows) -> KVStore:
    store = KVStore()
    store.create("a")
    store.create("b", created_at_height=3)
    for i, (d, k, v) in enumerate(rows):
        store.put(d, k, v, Provenance(f"{i:064x}", i + 1, 0, 0))
    return store


@settings(max_examples=200)
@given(ops)
def test_matches_list_model(rows):
    store = filled(rows)
    model: dict[tuple[str, str], list[bytes]] = {}
    for d, k, v in rows:
        model.setdefault((d, k), []).append(v)
    for d in "ab":
        for k in ("k1", "k2", "k3", "never"):
            expected = model.get((d, k), [])
            assert store.get(d, k) == expected
            assert store.count(d, k) == len(expected)
            for n in (1, 2, 5):
                assert store.last_n(d, k, n) == expected[-n:]


@settings(max_examples=50)
@given(ops)
def test_put_many_equals_repeated_put(rows):
    one = filled(rows)
    bulk = KVStore()
    bulk.create("a")
    bulk.create("b", created_at_height=3)
    bulk.put_many((d, k, v, Provenance(f"{i:064x}", i + 1, 0, 0)) for i, (d, k, v) in enumerate(rows))
    assert bulk == one


def test_unknown_dictionary():
    store = KVStore()
    with pytest.raises(UnknownDictionary):
        store.get("nope", "k")
    with pytest.raises(UnknownDictionary):
        store.put("nope", "k", b"", Provenance("0" * 64, 1, 0, 0))


def test_create_is_idempotent():
    store = KVStore()
    store.create("a", 2)
    store.put("a", "k", b"v", Provenance("0" * 64, 2, 0, 0))
    store.create("a", 9)
    assert store.get("a", "k") == [b"v"]
    assert store.dictionaries() == {"a": 2}


def test_last_n_requires_positive():
    with pytest.raises(ValueError):
        filled([]).last_n("a", "k1", 0)


def test_provenance_kept_alongside_values():
    store = filled([("a", "k1", b"x"), ("a", "k1", b"y")])
    rows = store.get_with_provenance("a", "k1")
    assert [v for v, _ in rows] == [b"x", b"y"]
    assert [p.height for _, p in rows] == [1, 2]


@settings(max_examples=20, deadline=None)
@given(ops)
def test_snapshot_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("snap") / "index.json"
    store = filled(rows)
    store.save_snapshot(path)
    assert KVStore.load_snapshot(path) == store


def test_snapshot_version_checked(tmp_path):
    path = tmp_path / "index.json"
    path.write_text('{"version": 99, "dictionaries": {}}')
    with pytest.raises(ValueError):
        KVStore.load_snapshot(path)
