"""Гармонический энкодер, базовый трансформер и эксперименты над ними."""
