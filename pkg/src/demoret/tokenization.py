"""The toolkit's whitespace tokenizer.

One scheme is shared by the lexical index, the encoder vocabulary, and
context-budget accounting: lowercase, split on Unicode whitespace, strip
surrounding ASCII punctuation, drop empties. Budgets measured with it are
therefore "toolkit tokens", not any pretrained LM's tokens.
"""

import string

_STRIP_CHARS = string.punctuation


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP_CHARS)
        if tok:
            tokens.append(tok)
    return tokens


def count_tokens(text: str) -> int:
    return len(tokenize(text))
