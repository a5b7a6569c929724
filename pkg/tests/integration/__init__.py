"""
Acceptance Tests Package
========================

End-to-end runs marked ``slow``; they need no external services.

To run acceptance tests:
    pytest tests/integration/ -v -m slow
"""
