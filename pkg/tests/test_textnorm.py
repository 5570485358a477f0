import pytest
from hypothesis import given
from hypothesis import strategies as st

from xlpl.textnorm import (
    InvalidTokenError,
    NormalizedText,
    TokenSet,
    decode,
    encode,
    latin_tokens,
    normalize,
    normalize_str,
    multilingual_tokens,
)

TS = latin_tokens()


class TestTokenSet:
    def test_special_tokens_distinct_and_not_characters(self):
        assert TS.blank_id != TS.word_boundary_id
        assert TS.blank_id not in TS.character_ids
        assert TS.word_boundary_id not in TS.character_ids

    def test_apostrophe_and_hyphen_present(self):
        assert "'" in TS and "-" in TS

    def test_multilingual_preset_has_54_symbols(self):
        ts = multilingual_tokens()
        # 53 characters plus the word boundary, plus the CTC blank
        assert len(ts.characters) + 1 == 54
        assert len(ts) == 55

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "tokens.txt"
        TS.save(p)
        back = TokenSet.load(p)
        assert back == TS
        lines = p.read_text(encoding="utf-8").splitlines()
        assert "#blank" in lines and "#wb" in lines

    def test_indices_dense(self):
        assert sorted(TS.index(s) for s in TS.characters) == TS.character_ids
        assert set(TS.character_ids) | {TS.blank_id, TS.word_boundary_id} == set(range(len(TS)))


class TestNormalize:
    def test_diacritics_case_punctuation(self):
        assert normalize_str("Héllo, World!", TS) == "hello world"

    def test_apostrophe_hyphen_kept(self):
        assert normalize_str("don't-stop", TS) == "don't-stop"

    def test_unmappable_script_discarded(self):
        assert normalize("日本", TS).words == ()

    def test_digits_dropped(self):
        assert normalize_str("route 66 north", TS) == "route north"

    def test_typographic_apostrophe_folded(self):
        assert normalize_str("don’t", TS) == "don't"

    def test_ligatures_and_eszett(self):
        assert normalize_str("Straße Œuvre", TS) == "strasse oeuvre"

    def test_multilingual_preset_keeps_accents(self):
        assert normalize_str("Ça été", multilingual_tokens()) == "ça été"

    @given(st.text(max_size=40))
    def test_idempotent(self, raw):
        once = normalize_str(raw, TS)
        assert normalize_str(once, TS) == once

    @given(st.text(max_size=40))
    def test_alphabet_closure(self, raw):
        seq = encode(normalize(raw, TS), TS)
        assert all(0 <= i < len(TS) for i in seq)


words_strategy = st.lists(
    st.lists(st.sampled_from(TS.character_ids), min_size=1, max_size=5).map(tuple), max_size=5
).map(lambda ws: NormalizedText(tuple(ws)))


class TestEncode:
    def test_boundary_between_words(self):
        a, b, c = TS.index("a"), TS.index("b"), TS.index("c")
        nt = NormalizedText(((a, b), (c,)))
        assert encode(nt, TS) == [a, b, TS.word_boundary_id, c]

    def test_single_word_no_boundary(self):
        nt = NormalizedText.from_words(["abc"], TS)
        assert TS.word_boundary_id not in encode(nt, TS)

    def test_empty(self):
        assert encode(NormalizedText(()), TS) == []

    def test_invalid_index_rejected(self):
        with pytest.raises((InvalidTokenError, ValueError)):
            encode(NormalizedText(((TS.blank_id,),)), TS)

    @given(words_strategy)
    def test_round_trip(self, nt):
        assert decode(encode(nt, TS), TS) == nt
