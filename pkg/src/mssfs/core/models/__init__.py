# Core models package
