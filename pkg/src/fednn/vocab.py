"""Shared vocabulary layout for the synthetic domains.

Every corpus, model and datastore in one experiment uses a single
integer vocabulary.  The first three ids are reserved control tokens;
everything from NUM_RESERVED up is a content token.
"""

EOS_ID = 0
SRC_TAG_ID = 1  # marks the start of a source segment in attack samples
TGT_TAG_ID = 2  # marks the start of a target segment in attack samples
NUM_RESERVED = 3


def content_ids(vocab_size: int) -> range:
    """Range of non-reserved token ids for a vocabulary of this size."""
    if vocab_size <= NUM_RESERVED:
        raise ValueError(
            "vocab_size must exceed the %d reserved ids, got %d"
            % (NUM_RESERVED, vocab_size)
        )
    return range(NUM_RESERVED, vocab_size)
