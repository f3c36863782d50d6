"""Code-switching CTC encoder toolkit."""
