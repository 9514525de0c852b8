import numpy as np
import pytest
import torch

from proactive_hri.codebook import (
    ActionCodebook,
    ActionEncoder,
    CodebookInputs,
    HashedBagEmbedder,
    MultiModalAction,
    build_codebook,
    encode_action,
    encode_all,
    fnv1a_32,
    stub_embed,
)
from proactive_hri.errors import BuildError, InputError
from proactive_hri.numerics import ParamStore
from proactive_hri.sim import generate_episode, intent_action_table, SimConfig
from oracles import bag_of_words, fnv1a_32 as fnv_ref


def act(u, e=1, m=1):
    return MultiModalAction(u, e, m)


def test_fnv_published_vectors():
    # reference values from the FNV authors' test suite
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"foobar") == 0xBF9CF968


def test_stub_embed_examples():
    assert not stub_embed("").any()
    assert np.allclose(stub_embed("hello hello"), stub_embed("hello"))
    assert np.allclose(stub_embed("Good Morning MISS", 64), bag_of_words("good morning miss", 64), atol=1e-15)
    assert fnv1a_32(b"morning") == fnv_ref(b"morning")
    assert np.linalg.norm(stub_embed("a b c d")) == pytest.approx(1.0)


def test_dedup_first_occurrence():
    anns = [act("x"), act("y"), act("x"), act("z"), {"action": act("y").to_dict()}]
    cb = build_codebook(anns)
    assert cb.k == 3 and len(cb) == 4
    assert [a.utterance for a in cb.actions] == ["x", "y", "z"]
    assert cb.null_index == 3 and cb.action(3) is None and cb.index_of(None) == 3
    assert build_codebook(anns).actions == cb.actions


def test_empty_codebook():
    with pytest.raises(BuildError):
        build_codebook([])


def test_table_gives_eight_actions():
    assert build_codebook(intent_action_table().values()).k == 8


def test_annotations_resolve_through_codebook():
    cfg = SimConfig()
    anns = [a for s in range(30) for a in generate_episode(cfg, s, f"e{s}")[1]]
    cb = build_codebook(list(intent_action_table().values()) + anns)
    assert cb.k == 8
    for a in anns:
        assert cb.action(cb.index_of(a.action())) == a.action()


def test_codebook_round_trip():
    cb = ActionCodebook([act("hi", 2, 3), act("yo", 4, 5)])
    assert ActionCodebook.from_dict(cb.to_dict()) == cb


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return ActionEncoder(d_model=12, utterance_dim=16)


def test_encode_shapes_and_determinism(encoder):
    emb = HashedBagEmbedder(16)
    a = act("hello there", 3, 4)
    phi = encode_action(a, emb, encoder)
    assert phi.shape == (12,)
    assert torch.equal(phi, encode_action(a, emb, encoder))
    cb = ActionCodebook([act("a"), act("b"), act("c")])
    assert encode_all(cb, emb, encoder).shape == (4, 12)


def test_motion_only_changes_motion_slice(encoder):
    emb = HashedBagEmbedder(16)
    x = CodebookInputs.build(ActionCodebook([act("wave hi", 2, 3), act("wave hi", 2, 9)]), emb)
    inp = encoder.ffn_input(x.utterance, x.expression_ids, x.motion_ids)
    diff = (inp[0] != inp[1]).nonzero().flatten()
    assert diff.min() >= 16 + 16  # utterance then expression come first


def test_permutation_permutes_rows(encoder):
    emb = HashedBagEmbedder(16)
    acts = [act("a", 1, 1), act("b", 2, 2), act("c", 3, 3)]
    phi = encode_all(ActionCodebook(acts), emb, encoder)
    perm = encode_all(ActionCodebook([acts[2], acts[0], acts[1]]), emb, encoder)
    assert torch.allclose(perm[:3], phi[[2, 0, 1]], atol=1e-6)
    assert torch.equal(perm[3], phi[3])


def test_ffn_step_changes_every_row(encoder):
    emb = HashedBagEmbedder(16)
    cb = ActionCodebook([act("a"), act("b", 2, 2), act("c", 3, 3)])
    before = encode_all(cb, emb, encoder).detach()
    store = ParamStore(encoder.ffn.named_parameters(), lr=1e-2)
    encode_all(cb, emb, encoder)[:3].sum().backward()
    store.step()
    after = encode_all(cb, emb, encoder).detach()
    assert all(not torch.equal(before[i], after[i]) for i in range(3))


def test_out_of_vocabulary(encoder):
    with pytest.raises(InputError):
        encode_action(act("x", 99, 1), HashedBagEmbedder(16), encoder)
