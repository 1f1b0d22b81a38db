"""Database extension shared by models and services."""
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, scoped_session, sessionmaker


class Model(DeclarativeBase):
    """Declarative base for persistent records."""


class Database:
    """Engine plus a scoped session, bound once by ``create_app``."""

    Model = Model

    def __init__(self):
        self.engine: Optional[Engine] = None
        self.session = scoped_session(sessionmaker(expire_on_commit=False))

    def init_app(self, uri: str):
        if self.engine is not None:
            self.session.remove()
            self.engine.dispose()
        self.engine = create_engine(uri, pool_pre_ping=True)
        self.session.configure(bind=self.engine)

    def create_all(self):
        self.Model.metadata.create_all(self.engine)

    def drop_all(self):
        self.Model.metadata.drop_all(self.engine)


# Initialize the registry database handle
db = Database()
