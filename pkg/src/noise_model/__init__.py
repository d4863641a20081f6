# Modèle de bruit et vecteurs auxiliaires
