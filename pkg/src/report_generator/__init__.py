# Module de génération des rapports d'exécution
# Responsable de l'écriture des rapports JSON, tableaux CSV et images
