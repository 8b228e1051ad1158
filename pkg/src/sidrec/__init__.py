"""sidrec: a co-trained semantic-ID tokenizer and generative recommender
with a dynamic one-to-many beam index, at desk scale."""

__version__ = "0.1.0"
