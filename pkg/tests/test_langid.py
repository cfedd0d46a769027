from __future__ import annotations

import json
from pathlib import Path

import pytest

from luthier.langid import (
    PROFILE_SIZE,
    LangIdError,
    LanguageProfile,
    build_profile,
    builtin_profiles,
    detect,
    load_profile,
    save_profile,
)

DATA = Path(__file__).parent / "data"
CORPORA = Path(__file__).parents[1] / "src" / "luthier" / "assets" / "corpora"


def count_trigrams_oracle(text: str) -> dict[str, int]:
    """From-scratch trigram counter used to audit the shipped profiles."""
    counts: dict[str, int] = {}
    word = []
    for ch in text.casefold() + " ":
        if ch.isalpha():
            word.append(ch)
            continue
        if word:
            padded = "_" + "".join(word) + "_"
            for i in range(len(padded) - 2):
                tri = padded[i : i + 3]
                counts[tri] = counts.get(tri, 0) + 1
            word = []
    return counts


@pytest.fixture(scope="module")
def profiles():
    return builtin_profiles()


# ---------------------------------------------------------------------------
# build_profile


def test_profile_dominated_by_repeated_trigram():
    profile = build_profile("aaaa " * 2500, "xx")
    assert profile.trigram_ranks["aaa"] == 1


def test_build_profile_deterministic():
    corpus = (CORPORA / "fr.txt").read_text(encoding="utf-8")
    assert build_profile(corpus, "fr") == build_profile(corpus, "fr")


def test_corpus_too_small():
    with pytest.raises(LangIdError, match="too small"):
        build_profile("bonjour tout le monde", "fr")


def test_french_corpus_top_trigrams():
    # independent count of the shipped corpus must agree on the signature
    # French trigrams landing in the top 20
    corpus = (CORPORA / "fr.txt").read_text(encoding="utf-8")
    profile = build_profile(corpus, "fr")
    top20 = {t for t, r in profile.trigram_ranks.items() if r <= 20}
    assert "_de" in top20
    assert "es_" in top20

    oracle_counts = count_trigrams_oracle(corpus)
    oracle_top20 = {
        t for t, _ in sorted(oracle_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:20]
    }
    assert top20 == oracle_top20


def test_frequency_ties_break_lexicographically():
    # every trigram occurs exactly once, so ranks follow sorted order
    profile = build_profile("zyx wvu " * 1500, "xx")
    ranked = sorted(profile.trigram_ranks.items(), key=lambda kv: kv[1])
    assert [t for t, _ in ranked] == sorted(t for t, _ in ranked)


def test_profile_capped_at_limit():
    corpus = " ".join(f"mot{i}xyz" for i in range(4000))
    profile = build_profile(corpus, "xx")
    assert len(profile.trigram_ranks) <= PROFILE_SIZE
    ranks = sorted(profile.trigram_ranks.values())
    assert ranks == list(range(1, len(ranks) + 1))


# ---------------------------------------------------------------------------
# detect


def test_detect_french_sentence(profiles):
    verdict = detect("Le chat dort sur le canapé parce qu'il fait froid dehors.", profiles)
    assert verdict.language == "fr"


def test_detect_english_sentence(profiles):
    verdict = detect(
        "The committee approved the proposal after extensive deliberation yesterday.",
        profiles,
    )
    assert verdict.language == "en"


def test_detect_no_letters_is_und(profiles):
    verdict = detect("42 — 17 %", profiles)
    assert verdict.language == "und"
    assert verdict.confidence == 0.0


def test_detect_short_text_is_und(profiles):
    assert detect("le chat dort", profiles).language == "und"


def test_detect_is_pure(profiles):
    text = "Les élèves ont terminé leurs devoirs avant la nuit."
    assert detect(text, profiles) == detect(text, profiles)


def test_detect_profile_order_invariance(profiles):
    rows = [json.loads(l) for l in (DATA / "langid_sentences.jsonl").open(encoding="utf-8")]
    reversed_profiles = list(reversed(profiles))
    for row in rows[::10]:
        assert detect(row["text"], profiles) == detect(row["text"], reversed_profiles)


def test_detect_distance_tie_breaks_by_iso_code(profiles):
    fr = next(p for p in profiles if p.language == "fr")
    clone = LanguageProfile(language="aa", trigram_ranks=fr.trigram_ranks)
    verdict = detect(
        "Le chat dort sur le canapé parce qu'il fait froid dehors.", [fr, clone], 0.0
    )
    assert verdict.language == "aa"
    assert verdict.confidence == 0.0


def test_detect_requires_profiles():
    with pytest.raises(LangIdError, match="profile"):
        detect("du texte qui ne manque pas de lettres", [])


def test_single_profile_detection(profiles):
    fr = [p for p in profiles if p.language == "fr"]
    verdict = detect("Le train de nuit traverse lentement la campagne endormie.", fr)
    assert verdict.language == "fr"


def test_accuracy_on_shipped_sentences(profiles):
    rows = [json.loads(l) for l in (DATA / "langid_sentences.jsonl").open(encoding="utf-8")]
    assert len(rows) == 200
    correct = sum(1 for r in rows if detect(r["text"], profiles).language == r["language"])
    assert correct / len(rows) >= 0.95


# ---------------------------------------------------------------------------
# serialization


def test_profile_roundtrip(tmp_path):
    profile = build_profile("le monde entier est un théâtre " * 400, "fr")
    path = tmp_path / "fr.profile"
    save_profile(profile, path)
    loaded = load_profile(path)
    assert loaded == profile
    first_line = path.read_text(encoding="utf-8").splitlines()[0]
    trigram, rank = first_line.split("\t")
    assert rank == "1"


def test_load_profile_rejects_bad_ranks(tmp_path):
    path = tmp_path / "bad.profile"
    path.write_text("abc\t1\ndef\t3\n", encoding="utf-8")
    with pytest.raises(LangIdError, match="permutation"):
        load_profile(path)


def test_load_profile_rejects_malformed_line(tmp_path):
    path = tmp_path / "bad.profile"
    path.write_text("abc 1\n", encoding="utf-8")
    with pytest.raises(LangIdError, match="malformed"):
        load_profile(path)


def test_builtin_profiles_are_valid():
    profiles = builtin_profiles()
    assert {p.language for p in profiles} == {"en", "fr"}
    for p in profiles:
        assert len(p.trigram_ranks) == PROFILE_SIZE
        assert sorted(p.trigram_ranks.values()) == list(range(1, PROFILE_SIZE + 1))
