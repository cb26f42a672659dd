"""Bundled fixture data: phecode map, ranked vocabulary, ATC3 drug map."""

from __future__ import annotations

from importlib.resources import as_file, files

from ..drugs import AtcMap, load_atc_map
from ..phenotype import PhecodeMap, PhenotypeVocabulary, load_phecode_map, load_vocabulary_csv

PHECODE_MAP_FILE = "phecode_map.csv"
VOCABULARY_FILE = "vocabulary_top40.csv"
ATC_MAP_FILE = "atc3_map.csv"


def default_phecode_map() -> PhecodeMap:
    with as_file(files(__package__) / PHECODE_MAP_FILE) as path:
        return load_phecode_map(path)


def default_vocabulary() -> PhenotypeVocabulary:
    with as_file(files(__package__) / VOCABULARY_FILE) as path:
        return load_vocabulary_csv(path)


def default_atc_map() -> AtcMap:
    with as_file(files(__package__) / ATC_MAP_FILE) as path:
        return load_atc_map(path)
