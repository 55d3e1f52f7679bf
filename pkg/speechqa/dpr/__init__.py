__version__ = "1.0.0"

from speechqa.dpr.encoders import InputKind, RetrieverModel, build_retriever  # noqa: E402
