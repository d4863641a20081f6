# Exécution parallèle des réalisations de Monte-Carlo
