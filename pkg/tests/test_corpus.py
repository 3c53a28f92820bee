import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdner.corpus import (
    AnnotatorProfile,
    CorpusError,
    CrowdCorpus,
    EntitySpan,
    Sentence,
    extract_spans,
    load_corpus,
    make_tagset,
    parse_corpus,
    repair_bio,
    save_corpus,
    split_corpus,
    synth_generate,
    tags_from_spans,
    template_corpus,
    write_corpus,
    write_tagset,
)
from crowdner.evaluation import evaluate

TAGSET = make_tagset(("PER", "LOC"))


def tiny_corpus():
    sentences = (
        Sentence("s00000", ("anna", "kim", "visited", "oslo")),
        Sentence("s00001", ("bob", "slept")),
    )
    annotations = {
        "s00000": {
            0: ("B-PER", "I-PER", "O", "B-LOC"),
            1: ("B-PER", "O", "O", "B-LOC"),
        },
        "s00001": {0: ("B-PER", "O")},
    }
    expert = {
        "s00000": ("B-PER", "I-PER", "O", "B-LOC"),
        "s00001": ("B-PER", "O"),
    }
    return CrowdCorpus(TAGSET, sentences, 2, annotations, expert)


# ---------------------------------------------------------------------------
# repair_bio


def test_repair_orphan_i_becomes_b():
    assert repair_bio(["I-PER", "O"]) == ("B-PER", "O")


def test_repair_valid_sequence_unchanged():
    assert repair_bio(["B-PER", "I-PER", "O"]) == ("B-PER", "I-PER", "O")


def test_repair_type_mismatch_forces_b():
    assert repair_bio(["B-LOC", "I-PER"]) == ("B-LOC", "B-PER")


def test_repair_rejects_unknown_entity_type():
    with pytest.raises(CorpusError):
        repair_bio(["B-GPE"], entity_types=("PER",))


def test_repair_rejects_malformed_tag():
    with pytest.raises(CorpusError):
        repair_bio(["B_PER"])


@given(st.lists(st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"]), min_size=1, max_size=12))
def test_repair_output_is_always_valid(tags):
    fixed = repair_bio(tags)
    extract_spans(fixed)  # raises on invalid BIO
    assert repair_bio(fixed) == fixed  # idempotent


# ---------------------------------------------------------------------------
# extract_spans / tags_from_spans


def test_extract_spans_basic():
    spans = extract_spans(["B-PER", "I-PER", "O", "B-LOC"])
    assert spans == {EntitySpan(0, 2, "PER"), EntitySpan(3, 4, "LOC")}


def test_extract_spans_all_outside():
    assert extract_spans(["O", "O", "O"]) == set()


def test_extract_spans_adjacent_b():
    spans = extract_spans(["B-PER", "B-PER"])
    assert spans == {EntitySpan(0, 1, "PER"), EntitySpan(1, 2, "PER")}


def test_extract_spans_rejects_invalid():
    with pytest.raises(CorpusError):
        extract_spans(["O", "I-PER"])


@st.composite
def span_sets(draw):
    length = draw(st.integers(2, 14))
    n_spans = draw(st.integers(0, 4))
    spans = []
    occupied = set()
    for _ in range(n_spans):
        start = draw(st.integers(0, length - 1))
        end = draw(st.integers(start + 1, length))
        if any(i in occupied for i in range(start, end)):
            continue
        occupied.update(range(start, end))
        spans.append(EntitySpan(start, end, draw(st.sampled_from(["PER", "LOC"]))))
    return length, set(spans)


@given(span_sets())
def test_spans_roundtrip(case):
    length, spans = case
    assert extract_spans(tags_from_spans(spans, length)) == spans


def test_tags_from_spans_rejects_overlap():
    with pytest.raises(CorpusError):
        tags_from_spans({EntitySpan(0, 2, "PER"), EntitySpan(1, 3, "LOC")}, 4)


# ---------------------------------------------------------------------------
# parse / write


def test_parse_corpus_counts(tmp_path):
    path = str(tmp_path / "c.tsv")
    save_corpus(tiny_corpus(), path)
    corpus = load_corpus(path, has_expert=True)
    assert len(corpus.sentences) == 2
    assert corpus.num_annotators == 2
    assert corpus.num_annotations == 3
    assert corpus.expert_labels["s00001"] == ("B-PER", "O")


def test_parse_single_sentence_one_annotator(tmp_path):
    path = tmp_path / "one.tsv"
    path.write_text("hello\tO\nworld\tO\n")
    write_tagset(TAGSET, str(path) + ".tags")
    corpus = load_corpus(str(path))
    assert len(corpus.sentences) == 1
    assert corpus.num_annotations == 1


def test_parse_wrong_column_count_cites_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tO\tO\nb\tO\n")
    with pytest.raises(CorpusError, match=":2"):
        parse_corpus(str(path), TAGSET)


def test_parse_undeclared_tag_names_it(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tB-GPE\n")
    with pytest.raises(CorpusError, match="B-GPE"):
        parse_corpus(str(path), TAGSET)


def test_parse_partial_annotation_rejected(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tO\nb\t-\n")
    with pytest.raises(CorpusError, match="partially"):
        parse_corpus(str(path), TAGSET)


def test_parse_repairs_invalid_bio(tmp_path):
    path = tmp_path / "fix.tsv"
    path.write_text("a\tI-PER\nb\tI-PER\n")
    corpus = parse_corpus(str(path), TAGSET)
    assert corpus.annotations["s00000"][0] == ("B-PER", "I-PER")


def test_write_parse_roundtrip(tmp_path):
    path = str(tmp_path / "c.tsv")
    write_corpus(tiny_corpus(), path)
    reparsed = parse_corpus(path, TAGSET, has_expert=True)
    path2 = str(tmp_path / "c2.tsv")
    write_corpus(reparsed, path2)
    assert open(path).read() == open(path2).read()


def test_roundtrip_without_expert(tmp_path):
    corpus = tiny_corpus()
    corpus.expert_labels.clear()
    path = str(tmp_path / "c.tsv")
    assert write_corpus(corpus, path) is False
    reparsed = parse_corpus(path, TAGSET)
    assert reparsed.num_annotators == 2
    assert reparsed.annotations["s00000"] == corpus.annotations["s00000"]


# ---------------------------------------------------------------------------
# split_corpus


def test_split_sizes_85_15():
    corpus = template_corpus(100, seed=0)
    a, b = split_corpus(corpus, [0.85, 0.15], seed=7)
    assert len(a.sentences) == 85 and len(b.sentences) == 15


def test_split_identity():
    corpus = template_corpus(10, seed=0)
    (only,) = split_corpus(corpus, [1.0], seed=3)
    assert [s.id for s in only.sentences] == [s.id for s in corpus.sentences]


def test_split_deterministic():
    corpus = template_corpus(50, seed=0)
    first = split_corpus(corpus, [0.6, 0.4], seed=5)
    second = split_corpus(corpus, [0.6, 0.4], seed=5)
    assert [s.id for s in first[0].sentences] == [s.id for s in second[0].sentences]
    assert [s.id for s in first[1].sentences] == [s.id for s in second[1].sentences]


def test_split_remainder_goes_to_first_part():
    corpus = template_corpus(10, seed=0)
    parts = split_corpus(corpus, [1 / 3, 1 / 3, 1 / 3], seed=1)
    assert [len(p.sentences) for p in parts] == [4, 3, 3]


@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_split_partition_property(n, seed):
    corpus = template_corpus(n, seed=1)
    parts = split_corpus(corpus, [0.5, 0.3, 0.2], seed=seed)
    ids = [frozenset(s.id for s in p.sentences) for p in parts]
    assert sum(len(i) for i in ids) == n
    assert frozenset.union(*ids) == {s.id for s in corpus.sentences}
    for part in parts:
        for s in part.sentences:
            assert part.annotations.get(s.id) == corpus.annotations.get(s.id)


def test_split_empty_corpus_rejected():
    corpus = template_corpus(5, seed=0)
    empty = CrowdCorpus(corpus.tagset, (), 0, {}, {})
    with pytest.raises(CorpusError):
        split_corpus(empty, [1.0], seed=0)


def test_split_bad_fractions_rejected():
    corpus = template_corpus(5, seed=0)
    with pytest.raises(ValueError):
        split_corpus(corpus, [0.5, 0.4], seed=0)


# ---------------------------------------------------------------------------
# synth_generate


def types_of(corpus):
    return corpus.entity_types


def test_synth_zero_noise_reproduces_expert():
    gold = template_corpus(30, seed=2)
    clean = AnnotatorProfile.clean(types_of(gold))
    crowd = synth_generate(gold, [clean, clean], coverage=1.0, seed=9)
    assert crowd.num_annotations == 60
    for sid, sent_ann in crowd.annotations.items():
        for tags in sent_ann.values():
            assert tags == gold.expert_labels[sid]


def test_synth_full_miss_gives_all_o():
    gold = template_corpus(20, seed=2)
    types = types_of(gold)
    eraser = AnnotatorProfile(1.0, AnnotatorProfile.clean(types).confusion, 0.0, 0.0)
    crowd = synth_generate(gold, [eraser], coverage=1.0, seed=9)
    for sent_ann in crowd.annotations.values():
        for tags in sent_ann.values():
            assert set(tags) == {"O"}


def test_synth_deterministic():
    gold = template_corpus(25, seed=2)
    profile = AnnotatorProfile.spammer(types_of(gold))
    a = synth_generate(gold, [profile], coverage=0.5, seed=4)
    b = synth_generate(gold, [profile], coverage=0.5, seed=4)
    assert a.annotations == b.annotations


def test_synth_coverage_subset():
    gold = template_corpus(40, seed=2)
    clean = AnnotatorProfile.clean(types_of(gold))
    crowd = synth_generate(gold, [clean], coverage=0.25, seed=4)
    assert crowd.num_annotations == 10


def test_synth_spammer_scores_poorly():
    # derived oracle: generate, then score the spammer against gold
    gold = template_corpus(200, seed=13)
    spammer = AnnotatorProfile.spammer(types_of(gold))
    crowd = synth_generate(gold, [spammer], coverage=1.0, seed=13)
    preds, refs = [], []
    for s in crowd.sentences:
        preds.append(crowd.annotations[s.id][0])
        refs.append(crowd.expert_labels[s.id])
    assert evaluate(preds, refs).f1 < 40.0


def test_synth_requires_profiles():
    gold = template_corpus(5, seed=0)
    with pytest.raises(ValueError):
        synth_generate(gold, [], coverage=1.0, seed=0)


def test_synth_output_is_valid_bio():
    gold = template_corpus(50, seed=3)
    noisy = AnnotatorProfile.spammer(types_of(gold))
    crowd = synth_generate(gold, [noisy], coverage=1.0, seed=8)
    for sent_ann in crowd.annotations.values():
        for tags in sent_ann.values():
            assert repair_bio(tags, types_of(gold)) == tags


# ---------------------------------------------------------------------------
# template grammar


def test_template_corpus_deterministic():
    a = template_corpus(30, seed=6)
    b = template_corpus(30, seed=6)
    assert a.sentences == b.sentences
    assert a.expert_labels == b.expert_labels


def test_template_corpus_has_entities_and_valid_bio():
    corpus = template_corpus(100, seed=1)
    total = 0
    for sid, tags in corpus.expert_labels.items():
        spans = extract_spans(tags)
        total += len(spans)
        assert len(tags) == len(corpus.sentence_by_id(sid).tokens)
    assert total >= 100
    assert set(corpus.entity_types) == {"PER", "LOC", "ORG"}
