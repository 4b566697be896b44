# App package
