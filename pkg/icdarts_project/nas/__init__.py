# Differentiable architecture search engine (CDARTS / ICDARTS) as a Django app.
