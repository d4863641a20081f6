# Vérification numérique de la théorie (oracles et contrôles de Monte-Carlo)
