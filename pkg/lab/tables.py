"""
Built-in mapping tables (translation, linguistic, knowledge).

Every word is a single vocabulary token. Tables are bijective so the
inverse direction is derived rather than stored.
"""

from typing import Dict

EN_FR: Dict[str, str] = {
    "cat": "chat",
    "dog": "chien",
    "house": "maison",
    "water": "eau",
    "bread": "pain",
    "apple": "pomme",
    "book": "livre",
    "car": "voiture",
    "sun": "soleil",
    "moon": "lune",
    "tree": "arbre",
    "flower": "fleur",
    "school": "ecole",
    "friend": "ami",
    "city": "ville",
    "sea": "mer",
    "sky": "ciel",
    "door": "porte",
    "window": "fenetre",
    "milk": "lait",
    "cheese": "fromage",
    "horse": "cheval",
    "bird": "oiseau",
    "fish": "poisson",
    "chair": "chaise",
    "hand": "main",
    "night": "nuit",
    "day": "jour",
    "red": "rouge",
    "green": "vert",
}

ANTONYMS: Dict[str, str] = {
    "hot": "cold",
    "big": "small",
    "fast": "slow",
    "up": "down",
    "happy": "sad",
    "light": "dark",
    "open": "closed",
    "early": "late",
    "rich": "poor",
    "strong": "weak",
    "hard": "soft",
    "high": "low",
    "long": "short",
    "full": "empty",
    "young": "old",
    "wet": "dry",
    "loud": "quiet",
    "thick": "thin",
    "near": "far",
    "win": "lose",
    "push": "pull",
    "buy": "sell",
    "give": "take",
    "love": "hate",
    "first": "last",
    "inside": "outside",
    "begin": "end",
    "true": "false",
    "good": "bad",
    "clean": "dirty",
    "wide": "narrow",
}

COUNTRY_CAPITAL: Dict[str, str] = {
    "france": "paris",
    "japan": "tokyo",
    "italy": "rome",
    "spain": "madrid",
    "germany": "berlin",
    "egypt": "cairo",
    "russia": "moscow",
    "china": "beijing",
    "canada": "ottawa",
    "kenya": "nairobi",
    "peru": "lima",
    "chile": "santiago",
    "greece": "athens",
    "norway": "oslo",
    "sweden": "stockholm",
    "finland": "helsinki",
    "poland": "warsaw",
    "austria": "vienna",
    "hungary": "budapest",
    "portugal": "lisbon",
    "ireland": "dublin",
    "cuba": "havana",
    "thailand": "bangkok",
    "vietnam": "hanoi",
    "turkey": "ankara",
    "iran": "tehran",
    "iraq": "baghdad",
    "denmark": "copenhagen",
    "belgium": "brussels",
    "nepal": "kathmandu",
}


def inverse(table: Dict[str, str]) -> Dict[str, str]:
    inv = {v: k for k, v in table.items()}
    if len(inv) != len(table):
        raise ValueError("mapping table is not bijective")
    return inv


# name -> (family, table)
MAPPING_TABLES = {
    "en_fr": ("translation", EN_FR),
    "fr_en": ("translation", inverse(EN_FR)),
    "antonym": ("linguistic", ANTONYMS),
    "country_capital": ("knowledge", COUNTRY_CAPITAL),
    "capital_country": ("knowledge", inverse(COUNTRY_CAPITAL)),
}


def all_words():
    words = set()
    for _, table in MAPPING_TABLES.values():
        words.update(table)
        words.update(table.values())
    return sorted(words)
