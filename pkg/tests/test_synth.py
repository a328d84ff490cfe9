import pytest

from tcda.config import ConfigError, SyntheticSpec
from tcda.dialogue import dump_dialogues, load_dialogues, parse_dialogue
from tcda.grid import encode_grids, find_conflicts
from tcda.synth import InfeasibleSpec, gen_synthetic, split_dev

SPECS = [
    SyntheticSpec(n_dialogues=30, seed=1),
    SyntheticSpec(n_dialogues=30, seed=2, quads_per_dialogue=4, branching=4, interleave=True, filler_min=3, filler_max=8),
    SyntheticSpec(n_dialogues=30, seed=3, distractors=False, root_target_rate=1.0),
]


def test_same_spec_gives_identical_bytes(tmp_path):
    spec = SyntheticSpec(seed=1)
    dump_dialogues(gen_synthetic(spec), tmp_path / "a.jsonl")
    dump_dialogues(gen_synthetic(spec), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert gen_synthetic(spec) != gen_synthetic(spec.replace(seed=2))


@pytest.mark.parametrize("spec", SPECS, ids=["default", "interleaved", "root-targets"])
def test_output_validates_and_has_requested_quads(spec, tmp_path):
    data = gen_synthetic(spec)
    assert len(data) == spec.n_dialogues
    dump_dialogues(data, tmp_path / "d.jsonl")
    for d, again in zip(data, load_dialogues(tmp_path / "d.jsonl")):
        assert parse_dialogue(d.to_record()) == d == again
        assert len(d.quadruples) == spec.quads_per_dialogue
        assert spec.min_utterances <= len(d.utterances) <= spec.max_utterances
        assert not find_conflicts(d, d.quadruples)
        encode_grids(d)


def test_distractor_threads_carry_their_own_target():
    data = gen_synthetic(SyntheticSpec(n_dialogues=40, seed=5, branching=3, quads_per_dialogue=3))
    root_tokens = lambda d: len(d.utterances[0].tokens)
    outside_root = sum(q.target[0] >= root_tokens(d) for d in data for q in d.quadruples)
    inside_root = sum(q.target[0] < root_tokens(d) for d in data for q in d.quadruples)
    assert outside_root > 0 and inside_root > 0


def test_infeasible_and_invalid_specs():
    with pytest.raises(InfeasibleSpec):
        gen_synthetic(SyntheticSpec(min_utterances=3, max_utterances=3, quads_per_dialogue=5))
    with pytest.raises(ConfigError):
        SyntheticSpec(min_utterances=5, max_utterances=4)


def test_split_dev_takes_the_tail():
    data = gen_synthetic(SyntheticSpec(n_dialogues=10))
    tr, dev = split_dev(data, 0.2)
    assert tr == data[:8] and dev == data[8:]
    assert split_dev(data, 0.0) == (data, [])
