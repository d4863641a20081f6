# Socle numérique : erreurs, générateurs aléatoires, E/S de tenseurs
