# Fonctions de coût : perte empirique, pénalité de linéarité partielle, défloutage
