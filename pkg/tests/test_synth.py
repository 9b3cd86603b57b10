import pytest

from selgen.corpus import FeatureSpec, dump_scenario, featurize_scenario
from selgen.synth import SynthProfile, realize, synth_generate


def test_same_seed_same_corpus():
    a = synth_generate(7, 20)
    b = synth_generate(7, 20)
    assert [dump_scenario(s) for s in a] == [dump_scenario(s) for s in b]
    assert a != synth_generate(8, 20)


def test_default_profile_gold_sizes():
    corpus = synth_generate(7, 50, SynthProfile(12, 4))
    assert all(s.num_records == 12 and len(s.gold_selection) == 4 for s in corpus)


def test_all_salient_covers_everything():
    for s in synth_generate(3, 10, SynthProfile(records_per_scenario=5, salient_count=5)):
        assert s.gold_selection == set(range(5))


def test_gold_is_the_set_of_realized_records():
    for s in synth_generate(5, 30):
        clauses = [realize(s.records[j]) for j in sorted(s.gold_selection)]
        # without noise the description is the clause list joined by commas
        expect = []
        for c in clauses:
            expect += ([","] if expect else []) + c
        assert list(s.tokens) == expect + ["."]
        assert 0 in s.gold_selection and 1 in s.gold_selection


def test_temperature_value_appears_verbatim():
    for s in synth_generate(9, 20):
        assert str(s.records[0].numeric_attrs["max"]) in s.tokens


def test_synonyms_follow_time_of_day():
    corpus = synth_generate(2, 200)
    for s in corpus:
        morning = s.records[0].time_span[0] < 12
        assert ("near" in s.tokens) == morning and ("around" in s.tokens) == (not morning)


def test_noise_breaks_the_rule_sometimes():
    corpus = synth_generate(2, 200, SynthProfile(noise=0.5))
    broken = sum(("near" in s.tokens) != (s.records[0].time_span[0] < 12) for s in corpus)
    assert 50 < broken < 150


def test_featurize_is_total_on_generated_corpora():
    corpus = synth_generate(1, 40)
    spec = FeatureSpec.from_corpus(corpus[:5])  # a spec from a different slice still works
    for s in corpus:
        featurize_scenario(s, spec)


@pytest.mark.parametrize("n,k", [(1, 1), (4, 0), (4, 5)])
def test_profile_validation(n, k):
    with pytest.raises(ValueError):
        SynthProfile(records_per_scenario=n, salient_count=k)
